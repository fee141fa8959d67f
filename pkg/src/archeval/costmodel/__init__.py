from .dataset import (
    BASE_METRICS,
    Dataset,
    DatasetError,
    DatasetRecord,
    build_dataset,
    cost_report,
    ingest_csv,
    is_metric_name,
    read_dataset,
    sample_valid_indices,
    split_indices,
    write_dataset,
)
from .oracles import (
    CostModelError,
    CostReport,
    base_accuracy,
    flops,
    latency,
    node_flops,
    params,
    peak_memory,
    peak_memory_bruteforce,
    synthetic_accuracy,
)
from .profiles import DEVICE_NAMES, DeviceProfile, load_profiles
