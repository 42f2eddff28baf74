"""Speaker embeddings trained jointly with nonnative speech attribute units.

The subpackages are importable on their own; ``attrxvec.pipeline`` chains them
into a full experiment and ``attrxvec.cli`` exposes everything on the command
line.
"""

__version__ = "0.1.0"
