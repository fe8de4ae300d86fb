"""Editable, animatable portrait radiance fields.

Dynamic head+torso feature fields with depth-guided volume rendering, an
instruction-conditioned editing loop with progressive dataset update, and
expression/pose driving of the edited result.
"""

__version__ = "0.1.0"
