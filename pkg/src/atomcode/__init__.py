"""Segment-level ("atomistic") LLM coding of qualitative data.

Documents are split into analytic units, each unit is sent to a model on its
own with a versioned prompt template, every call is recorded in an
append-only ledger, and agreement between output columns is measured with
Cohen's kappa and related statistics.
"""

__version__ = "0.1.0"
