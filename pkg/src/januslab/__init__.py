"""januslab: desk-scale simulator for view-consistency failures (the Janus
problem) in score-distillation text-to-3D, with score clipping and PMI
prompt debiasing cures."""

__version__ = "0.1.0"
