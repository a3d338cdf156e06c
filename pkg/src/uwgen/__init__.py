"""uwgen: generate underwater-style imagery from lab photographs.

Pipeline pieces: dataset ingestion and object cropping, classic seeded
augmentation, cycle-consistent generator/discriminator training on a
numpy/numba kernel stack, Frechet-distance evaluation of generated sets,
a small CNN classifier harness, and darknet-format detection export.
"""

__version__ = "0.1.0"
