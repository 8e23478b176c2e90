import enum


class AllocatorKind(str, enum.Enum):
    """Bandwidth allocation criteria"""
    PF = "pf"
    PF_PRIME = "pf_prime"
    BF = "bf"
    ALPHA_FAIR = "alpha_fair"


class TransitionKind(enum.IntEnum):
    """Population transitions of the routing model"""
    ARRIVAL = 0
    ROUTE = 1
    DEPARTURE = 2


class CheckStatus(str, enum.Enum):
    """Outcome of a verification check"""
    PASS = "pass"
    FAIL = "fail"
    SKIPPED = "skipped"
    DIAGNOSTIC = "diagnostic"
