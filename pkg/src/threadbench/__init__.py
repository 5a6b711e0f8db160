"""Forum mail archives to multiple-choice reasoning benchmarks, plus a
rule-based reward, a from-scratch GRPO core, an RL expert router and an
evaluation harness."""

__version__ = "0.1.0"
