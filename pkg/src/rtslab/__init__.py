"""Backdoor attacks on continuous-control agents and the state-recovery defence.

Modules: ``diffnum`` (autodiff and Adam), ``envs``, ``agent`` (DDPG),
``backdoor`` (triggers and poisoning), ``defender`` (dynamics models and the
guard), ``harness`` (evaluation and reports), ``config`` and ``cli``.
"""
__version__ = "0.1.0"
