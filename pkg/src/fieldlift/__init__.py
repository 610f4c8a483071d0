"""fieldlift: desk-scale reconstruction of high-field-like MR images from low-field MRI.

An optimal-transport teacher learns the high-to-low-field degradation from
unpaired image sets and emits pseudo-pairs; a score-based student learns the
joint distribution of those pairs and reconstructs through conditional
annealed Langevin sampling against multi-coil k-space data.
"""

__version__ = "0.1.0"
