"""Counterfactual and online learning to rank with intervention-aware click debiasing."""

__version__ = "0.1.0"
