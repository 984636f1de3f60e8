"""lidlab: a toolkit for accent-robust spoken language identification experiments.

Subpackages cover corpus handling and synthetic phonotactic data, discrete-unit
quantization, a from-scratch transformer sequence classifier, probability
fusion, behavioral probes (block reversal, windowed majority vote), and
evaluation statistics (speaker bootstrap, McNemar, error profiles).
"""

__version__ = "0.1.0"
