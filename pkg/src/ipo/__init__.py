"""Invariant-policy optimization workbench.

Two desk-scale benchmarks for training policies that stay optimal across
domains: an LQR problem observed through per-domain distractor maps
(``lqr_distractor``, solved exactly through Lyapunov/Riccati machinery in
``numlin``) and a colored-keys gridworld (``gridworld``) trained with PPO
and a per-domain best-response scheme (``policy_nn``, ``rl_train``).
``exp_cli`` orchestrates seed sweeps and table/plot emission; ``oracles``
holds the independent brute-force checks used by tests and ``ipo selftest``.
"""

__version__ = "0.1.0"
