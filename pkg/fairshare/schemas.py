from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from fairshare.models import AllocatorKind, CheckStatus

STRICT = {"extra": "forbid", "allow_inf_nan": False}


# Scenario schemas
class CapacitySpec(BaseModel):
    A: List[List[float]]
    c: List[float]

    model_config = STRICT


class TrafficSpec(BaseModel):
    nu_bar: List[float]
    mu: List[float]
    P: Optional[List[List[float]]] = None

    model_config = STRICT


class PhaseSpec(BaseModel):
    alpha: List[float]
    rates: List[float]
    P: Optional[List[List[float]]] = None

    model_config = STRICT


class AllocatorSpec(BaseModel):
    kind: AllocatorKind = AllocatorKind.PF
    w: Optional[List[float]] = None
    alpha: float = Field(default=1.0, gt=0)

    model_config = STRICT


class RunSpec(BaseModel):
    t_end: Optional[float] = Field(default=None, gt=0)
    seed: int = 0
    box: int = Field(default=6, ge=0)
    burn_in: float = Field(default=0.0, ge=0)
    h_step: Optional[float] = Field(default=None, gt=0)
    scale: float = Field(default=1.0, ge=1)
    x0: Optional[List[float]] = None

    model_config = STRICT


class Scenario(BaseModel):
    name: Optional[str] = None
    description: Optional[str] = None
    capacity: CapacitySpec
    traffic: Optional[TrafficSpec] = None
    phase_type: Optional[List[PhaseSpec]] = None
    allocator: AllocatorSpec = AllocatorSpec()
    run: RunSpec = RunSpec()

    model_config = STRICT


# Command output schemas
class AllocationOutput(BaseModel):
    allocator: str
    x: List[float]
    rates: List[float]
    log_rates: List[Optional[float]]
    prices: Optional[List[float]] = None
    kkt_residual: Optional[float] = None


class CompareOutput(BaseModel):
    x: List[float]
    rates: Dict[str, List[float]]
    total_variation: Dict[str, float] = {}
    box: Optional[int] = None


# Verification report schemas
class CheckRecord(BaseModel):
    id: str
    ref: str
    instance: str
    measured: Optional[float] = None
    threshold: Optional[float] = None
    status: CheckStatus
    runtime: float = 0.0
    detail: Optional[str] = None


class VerificationReport(BaseModel):
    status: str
    seeds: List[int]
    budget: float
    checks: List[CheckRecord]

    def deterministic_view(self) -> dict:
        """Report contents without wall-clock fields"""
        return self.model_dump(exclude={"checks": {"__all__": {"runtime"}}})

    @property
    def failed(self) -> List[CheckRecord]:
        return [c for c in self.checks if c.status == CheckStatus.FAIL]
