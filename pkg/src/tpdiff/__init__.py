"""Diffusion over GAN-learned triplane neural fields, at desk scale.

Pipeline: procedural scenes -> single-view dataset -> 3D GAN over triplanes
-> diffusion prior on the triplane space -> controllable sampling via
conditioning and/or rendering-based guidance with Langevin correction.
"""

__version__ = "0.1.0"
