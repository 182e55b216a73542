"""Variational intrinsic control: option discovery by maximising the mutual
information between an agent's choices and where it ends up."""

__version__ = "0.1.0"
