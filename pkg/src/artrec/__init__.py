"""Articulated object reconstruction toolkit.

Reconstructs the static and movable parts of an articulated object as two
explicit radiance grids and jointly estimates the joint motion (revolute or
prismatic) from posed RGBA images of the object in two states.  Ships with a
synthetic scene generator, the full evaluation metric suite, and a
CSG + ICP registration baseline.
"""

__version__ = "0.1.0"
