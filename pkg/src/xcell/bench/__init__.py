from .report import ReportRow, nearest_rank_percentile, write_csv
from .workloads import (ExperimentSpec, Mode, Workload, run_isolation,
                        run_micro, run_scalability)

__all__ = ["ExperimentSpec", "Mode", "ReportRow", "Workload",
           "nearest_rank_percentile", "run_isolation", "run_micro",
           "run_scalability", "write_csv"]
