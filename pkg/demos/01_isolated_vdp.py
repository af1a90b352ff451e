"""
One Van der Pol oscillator: Lyapunov function, its region, and expansion
=======================================================================

Runs in well under a minute.  ``python demos/01_isolated_vdp.py``
"""

import numpy as np

from veclyap import lyap
from veclyap.model import system_from_strings
from veclyap.sim import probe_roa

# the oscillator with negative damping mu = -1 is locally stable at the origin
vdp = system_from_strings(["a", "b"], [
    {"id": 1, "states": ["a", "b"], "f": ["b", "-a - b*(1 - a^2)"], "g": ["0", "0"]}])

# quadratic V, scaled so that {V <= 1} is the certified estimate
cert = lyap.certify_subsystem(vdp, 1, degree=2)
print("V =", cert.V.render())
print("sampling check:", lyap.sample_check(vdp, cert))

# compare against simulation on a coarse grid
probe = probe_roa(vdp, 1, cert.V, lo=-3, hi=3, cells=61, T=40.0, dt=0.02)
print("grid cells in {V <= 1}:", int(np.sum(probe.V <= 1)),
      "| converged cells:", int(probe.converged.sum()),
      "| certified but not converged:", probe.certified_outside())

# grow the estimate; the inscribed-ball radius never shrinks
grown = lyap.expand_roa(vdp, cert, iterations=20)
print("ball radius, degree 2:", " -> ".join(f"{r:.3f}" for r in grown.radius_history))
quartic = lyap.expand_roa(vdp, grown, iterations=20, degree=4)
print("ball radius, degree 4: %.3f" % quartic.radius_history[-1])

# a rough picture of the final estimate
probe4 = probe_roa(vdp, 1, quartic.V, lo=-3, hi=3, cells=31, T=40.0, dt=0.02)
for row in range(probe4.converged.shape[0] - 1, -1, -2):
    line = ""
    for col in range(probe4.converged.shape[1]):
        if probe4.V[row, col] <= 1:
            line += "#"
        elif probe4.converged[row, col]:
            line += "."
        else:
            line += " "
    print(line)
print("# certified (degree 4)   . converges in simulation")
