"""Forward-inference engine and profiler for an open-vocabulary panoptic
segmentation head: seeded synthetic weights, loop-oracle-verified kernels,
selectable fusion modes, synthetic-scene evaluation, and MAC/parameter
profiling.
"""

__version__ = "0.1.0"
