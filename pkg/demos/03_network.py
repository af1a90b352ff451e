"""
Nine coupled oscillators in seven subsystems
============================================

Degree-2 Lyapunov functions per subsystem, then the distributed schedule
from v_o = 0.5 everywhere, then a Monte-Carlo check.  About a minute on one
core.
"""

import time

from veclyap import certifier, lyap
from veclyap.model import build_vdp_network, paper_vdp_spec

net = build_vdp_network(paper_vdp_spec(seed=0))
for s in net.subsystems:
    print(f"S{s.id}: states {', '.join(s.states)}; listens to "
          f"{sorted(j for j in net.neighbors[s.id] if j != s.id)}")

t0 = time.perf_counter()
certs = lyap.lyapunov_for_system(net, degree=2)
print(f"\nLyapunov functions in {time.perf_counter() - t0:.0f} s")
print("V2 =", certs[2].V.render())

res = certifier.certify(net, certs, {i: 0.5 for i in net.ids})
print(f"\n{res.verdict.value} after {res.rounds} round(s), {res.solves} SDP solves")
print(res.to_csv())

rep = certifier.validate_schedule(net, certs, res, n=100)
print(f"{rep.passed}/{rep.trajectories} trajectories pass, largest |x(100)| = {rep.max_final_norm:.1e}")
