"""Competence-aware high-speed ground navigation on synthetic off-road terrain.

Subpackages cover the full stack: a procedural terrain simulator with an
analytic instability oracle (`terrain`), camera synthesis and multimodal
feature extraction (`sensing`), a small reverse-mode differentiation kernel
(`learncore`), the self-supervised terrain representation (`tron`), the
downstream instability predictors (`kinodyn`), the sampling-based planner and
shared-control filter (`planner`), and the operational shell (`dataset`,
`navigate`, `service`, `cli`).
"""

__version__ = "0.1.0"
