"""Frequency-domain multi-channel acoustic front-ends.

Modules: ``signal`` (framing, DFT, LFBE), ``beamform`` (super-directive
beamformer banks), ``gradnet`` (reverse-mode layers), ``mcmodel`` (CAT, DSF
and ESF networks, stage-wise training), ``scenesim`` (synthetic array scenes)
and ``cli``.
"""

__version__ = "0.1.0"
