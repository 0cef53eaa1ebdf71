import os
from dataclasses import dataclass

@dataclass
class Config:
    threads: int = int(os.getenv("CAVITYLAB_THREADS", "1"))
    chunk_size: int = int(os.getenv("CAVITYLAB_CHUNK_SIZE", "1024"))
    log_level: str = os.getenv("CAVITYLAB_LOG_LEVEL", "INFO")
    otlp_endpoint: str = os.getenv("CAVITYLAB_OTLP_ENDPOINT", "")

    # exact sums
    sym_tol: float = 1e-12
    bal_tol: float = 1e-10
    max_grid_points: int = 200_000

    # Monte-Carlo bands
    pos_pass_sigmas: float = 3.0
    pos_fail_sigmas: float = 5.0
    pos_atol: float = 1e-12
    decision_sigmas: float = 3.0
    undecided_sigmas: float = 2.0
    decision_atol: float = 1e-9
    bethe_batches: int = 20

    # enumeration budgets
    enumeration_budget: int = 2 ** 24
    nishimori_budget: int = 2_000_000
    max_overlap_q: int = 8

DEFAULT_CONFIG = Config()
