"""Layer-wise memory swapping vs pipeline parallelism, as cost models and simulators.

Modules, bottom-up: ``graph_core`` (profiles and cost models), ``partitioner``
(sub-model search), ``swap_scheduler`` (single-device timelines),
``pipeline_baselines`` (GPipe / 1F1B), ``decentral_sim`` (cluster simulation),
``report`` and ``cli`` (experiment matrix and command line).
"""

__version__ = "0.1.0"
