"""Desk-scale antibody language model with joint sequence/structure-token
pretraining: data ingestion, a geometric structure codec, a from-scratch
autodiff transformer encoder, the two-stage training schedule, and a
downstream fine-tuning/generation harness."""

__version__ = "0.1.0"
