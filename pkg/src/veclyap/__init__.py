"""Vector Lyapunov certification of interconnected polynomial systems.

Modules, bottom up: ``poly`` (sparse polynomials), ``sdp`` (block SDP
solver), ``sos`` (sum-of-squares programs), ``model`` (interconnected
systems and the Van der Pol network generator), ``lyap`` (subsystem
Lyapunov functions), ``certifier`` (epsilon-schedule protocol), ``control``
(decentralized feedback synthesis), ``sim`` (RK4 simulation), ``cli``.
"""
from .certifier import CertificationResult, Verdict, certify, validate_schedule
from .control import ControlLaw, synthesize
from .lyap import LyapunovCertificate, certify_subsystem, lyapunov_for_system
from .model import InterconnectedSystem, Subsystem, build_vdp_network, paper_vdp_spec
from .poly import Polynomial, VarSet
from .sdp import SolverOptions
from .sos import SosProgram, check_sos

__version__ = "0.1.0"

__all__ = [
    "CertificationResult",
    "ControlLaw",
    "InterconnectedSystem",
    "LyapunovCertificate",
    "Polynomial",
    "SolverOptions",
    "SosProgram",
    "Subsystem",
    "VarSet",
    "Verdict",
    "build_vdp_network",
    "certify",
    "certify_subsystem",
    "check_sos",
    "lyapunov_for_system",
    "paper_vdp_spec",
    "synthesize",
    "validate_schedule",
]
