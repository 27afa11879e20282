"""Rotation-robust point-cloud classification by teacher-student distillation.

A rotation-invariant teacher (hand-built local angle features) and a
pose-dependent student (feature-space patches plus multi-radius grouping)
are trained jointly on shared patch centers.  Low-rank alignment heads let
the student's patch attention maps follow the teacher's; at inference the
teacher is dropped and each head folds into one matrix.
"""

__version__ = "0.1.0"
