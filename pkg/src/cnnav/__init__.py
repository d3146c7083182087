"""Cross-layer navigation CNN for fine-grained classification, on a from-scratch numpy engine.

Subpackages and modules:

* :mod:`cnnav.engine`   tensors, primitives, reverse-mode tape, gradient checks
* :mod:`cnnav.backbone` five-stage residual feature extractor
* :mod:`cnnav.navigation` high->low ConvLSTM fusion, low->high attention, heads
* :mod:`cnnav.model`    the four ablation variants
* :mod:`cnnav.data`     synthetic dataset, PPM/PGM I/O, batching
* :mod:`cnnav.trainer`  SGD loop, evaluation, ablation runner
* :mod:`cnnav.cli`      command-line entry point
"""

__version__ = "0.1.0"
