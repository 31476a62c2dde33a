"""Motion-guided temporal segmentation of the left-ventricular cavity.

A numpy-only reverse-mode engine drives two 3D U-shaped networks: SS-Net
estimates deformation fields between adjacent phases without supervision, and
SS-SL segments a phase from its intensities plus a motion field. SS-BL fuses
the chronological and reverse-chronological predictions.
"""

__version__ = "0.1.0"
