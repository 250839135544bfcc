"""Software emulator and performance model of a pipelined CNN FPGA accelerator.

The package executes real CNN forward passes through channel-connected
streaming kernels (MemRD -> Conv -> Pool -> MemWR, plus a separate
normalization pass) and models cycles, memory traffic, and hardware
resources for design-space exploration over (vec_size, cu_num).
"""

from .model import (AcceleratorConfig, DeviceProfile, FeatureMap,
                    LayerDescriptor, LrnSpec, PoolSpec, TensorShape,
                    WeightBank, c_prime, output_dim, validate_network)

__version__ = "0.1.0"

__all__ = [
    "AcceleratorConfig", "DeviceProfile", "FeatureMap", "LayerDescriptor",
    "LrnSpec", "PoolSpec", "TensorShape", "WeightBank", "c_prime",
    "output_dim", "validate_network", "__version__",
]
