from enum import Enum

import numpy as np


class Precision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


class Phase(str, Enum):
    SFT = "sft"
    REFT = "reft"
    EVAL = "eval"
    THROUGHPUT = "throughput"


class MitigationTag(str, Enum):
    BASE = "base"
    PRACTICAL = "practical"
    RETRACE = "retrace"


class CheckStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    # Reported without a verdict (Base-mode variance)
    REPORT = "REPORT"
