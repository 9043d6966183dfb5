"""Backend selection for the hot convolution/pooling kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``SEF_KERNELS=python`` to force the fallback.
"""

import os

from . import _pykernels

python_kernels = _pykernels

compiled_kernels = None
if os.environ.get("SEF_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled_kernels
    except ImportError:
        compiled_kernels = None

_active = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "cython" if _active is compiled_kernels else "python"

conv_output_size = _pykernels.conv_output_size
im2col = _active.im2col
col2im = _active.col2im
maxpool_forward = _active.maxpool_forward
maxpool_backward = _active.maxpool_backward
