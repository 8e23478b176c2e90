"""
Scenario files: parsing, validation against the domain invariants, and the
built-in scenario catalogue.
"""

import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO, Union

import numpy as np
from pydantic import ValidationError

from fairshare.allocators import Allocator, BalanceTable, PhaseSharingAllocator, build_balance_table
from fairshare.capacity import CapacityRegion
from fairshare.errors import FairshareError, InvalidInputError, ScenarioError
from fairshare.models import AllocatorKind
from fairshare.schemas import Scenario
from fairshare.traffic import PhaseExpansion, PhaseType, PhaseTypeSpec, TrafficModel, expand_phase_type

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoadedScenario:
    """A validated scenario with its numeric objects built"""

    name: str
    spec: Scenario
    region: CapacityRegion
    model: Optional[TrafficModel] = None
    phases: Optional[PhaseTypeSpec] = None

    @property
    def num_classes(self) -> int:
        return self.region.num_classes

    def require_model(self, command: str) -> TrafficModel:
        if self.model is None:
            raise ScenarioError(f"traffic: required by '{command}' but missing from scenario {self.name}")
        return self.model

    def expansion(self) -> Optional[PhaseExpansion]:
        if self.phases is None:
            return None
        return expand_phase_type(self.region, self.require_model("phase expansion"), self.phases)

    def allocator(self, kind: Optional[AllocatorKind] = None, table: Optional[BalanceTable] = None, box: Optional[int] = None) -> Allocator:
        """Allocator named by the scenario (or `kind`), with a balance table built on demand"""
        kind = AllocatorKind(kind or self.spec.allocator.kind)
        if kind == AllocatorKind.BF and table is None:
            table = build_balance_table(self.region, max(1, box if box is not None else self.spec.run.box))
        return Allocator(kind, self.region, table=table, w=self.spec.allocator.w, alpha=self.spec.allocator.alpha)

    def phase_allocator(self, expansion: PhaseExpansion, kind: Optional[AllocatorKind] = None, box: Optional[int] = None) -> PhaseSharingAllocator:
        return PhaseSharingAllocator(self.allocator(kind, box=box), expansion.class_map, expansion.region)


def _guard(key: str, build):
    try:
        return build()
    except FairshareError as e:
        raise ScenarioError(f"{key}: {e}") from e
    except (ValueError, TypeError) as e:
        raise ScenarioError(f"{key}: {e}") from e


def build_scenario(spec: Scenario, name: Optional[str] = None) -> LoadedScenario:
    """Build the numeric objects of a schema-valid scenario, naming the key that fails"""
    cap = spec.capacity
    region = _guard("capacity", lambda: CapacityRegion(np.array(cap.A, dtype=float), np.array(cap.c, dtype=float)))
    R = region.num_classes

    model = None
    if spec.traffic is not None:
        t = spec.traffic
        for key, values in (("traffic.nu_bar", t.nu_bar), ("traffic.mu", t.mu)):
            if len(values) != R:
                raise ScenarioError(f"{key}: has {len(values)} entries, capacity has {R} classes")
        if any(v < 0 for v in t.nu_bar):
            raise ScenarioError("traffic.nu_bar: arrival rates must be nonnegative")
        if any(v <= 0 for v in t.mu):
            raise ScenarioError("traffic.mu: service rates must be positive")
        P = np.zeros((R, R)) if t.P is None else np.array(t.P, dtype=float)
        if P.shape != (R, R):
            raise ScenarioError(f"traffic.P: shape {P.shape} does not match {R} classes")
        model = _guard("traffic.P", lambda: TrafficModel(np.array(t.nu_bar), np.array(t.mu), P))

    phases = None
    if spec.phase_type is not None:
        if len(spec.phase_type) != R:
            raise ScenarioError(f"phase_type: has {len(spec.phase_type)} entries, capacity has {R} classes")
        built = []
        for r, p in enumerate(spec.phase_type):
            k = len(p.alpha)
            built.append(
                _guard(
                    f"phase_type[{r}]",
                    lambda p=p, k=k: PhaseType(
                        np.array(p.alpha), np.array(p.rates), np.zeros((k, k)) if p.P is None else np.array(p.P)
                    ),
                )
            )
        phases = PhaseTypeSpec(tuple(built))
        if model is None:
            raise ScenarioError("phase_type: needs a traffic object")
        if model.has_routing:
            raise ScenarioError("phase_type: cannot be combined with inter-class routing in traffic.P")

    alloc = spec.allocator
    if alloc.w is not None and len(alloc.w) != R:
        raise ScenarioError(f"allocator.w: has {len(alloc.w)} entries, capacity has {R} classes")
    if spec.run.x0 is not None and len(spec.run.x0) != R:
        raise ScenarioError(f"run.x0: has {len(spec.run.x0)} entries, capacity has {R} classes")

    return LoadedScenario(name=name or spec.name or "scenario", spec=spec, region=region, model=model, phases=phases)


def parse_scenario(source: Union[str, Path, TextIO, None]) -> LoadedScenario:
    """Read and validate a scenario from a path, an open stream, or stdin ('-' or None)"""
    if source is None or str(source) == "-":
        text, name = sys.stdin.read(), "stdin"
    elif hasattr(source, "read"):
        text, name = source.read(), getattr(source, "name", "stream")
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as e:
            raise ScenarioError(f"cannot read scenario {path}: {e}") from e
        name = path.stem

    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"malformed JSON in {name}: {e}") from e

    try:
        spec = Scenario.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "scenario"
        raise ScenarioError(f"{key}: {first['msg']}") from e

    scenario = build_scenario(spec, name=spec.name or name)
    logger.debug(f"Parsed scenario {scenario.name}: {scenario.region.describe()}")
    return scenario


def load_scenarios(paths: Iterable[Union[str, Path]]) -> List[LoadedScenario]:
    """Parse files and every *.json directly inside given directories"""
    loaded = []
    for entry in paths:
        path = Path(entry)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        loaded.extend(parse_scenario(f) for f in files)
    return loaded


def random_region_spec(seed: int, links: int = 3, classes: int = 4, load: float = 0.6) -> Dict:
    """Random region with each class on at least one link; loads put the busiest link at `load`"""
    rng = np.random.Generator(np.random.Philox(seed))
    while True:
        A = np.where(rng.random((links, classes)) < 0.6, rng.uniform(0.5, 1.5, (links, classes)), 0.0)
        if np.all(A.any(axis=0)) and np.all(A.any(axis=1)):
            break
    c = rng.uniform(1.0, 2.0, links)
    direction = rng.uniform(0.5, 1.0, classes)
    rho = direction * load / np.max(A @ direction / c)
    return {
        "name": f"random_{seed}",
        "description": f"random region with {links} links and {classes} classes",
        "capacity": {"A": np.round(A, 6).tolist(), "c": np.round(c, 6).tolist()},
        "traffic": {"nu_bar": np.round(rho, 6).tolist(), "mu": [1.0] * classes},
    }


BUILTIN_SPECS: Dict[str, Dict] = {
    "single_link_one": {
        "description": "one class on a unit link (processor sharing queue)",
        "capacity": {"A": [[1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.5], "mu": [1.0]},
        "run": {"t_end": 1000.0, "box": 8, "x0": [1]},
    },
    "single_link_two": {
        "description": "two classes sharing a unit link",
        "capacity": {"A": [[1.0, 1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.3, 0.3], "mu": [1.0, 1.0]},
        "run": {"t_end": 1000.0, "box": 8},
    },
    "two_link": {
        "description": "two unit links; class 3 crosses both",
        "capacity": {"A": [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]], "c": [1.0, 1.0]},
        "traffic": {"nu_bar": [0.4, 0.4, 0.4], "mu": [1.0, 1.0, 1.0]},
        "run": {"t_end": 1000.0, "box": 6, "x0": [1, 1, 1]},
    },
    "line_network": {
        "description": "three unit links in a line; class 1 crosses all, classes 2-4 use one link each",
        "capacity": {
            "A": [[1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 1.0]],
            "c": [1.0, 1.0, 1.0],
        },
        "traffic": {"nu_bar": [0.2, 0.3, 0.3, 0.3], "mu": [1.0, 1.0, 1.0, 1.0]},
        "run": {"t_end": 1000.0, "box": 6},
    },
    "random_7": random_region_spec(7),
    "tandem": {
        "description": "class 1 completions all move to class 2 on a shared unit link",
        "capacity": {"A": [[1.0, 1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.3, 0.0], "mu": [1.0, 1.0], "P": [[0.0, 1.0], [0.0, 0.0]]},
        "allocator": {"kind": "bf"},
        "run": {"t_end": 1000.0, "box": 6},
    },
    "reversible_routing": {
        "description": "symmetric feedback between two classes on a unit link",
        "capacity": {"A": [[1.0, 1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.21, 0.21], "mu": [1.0, 1.0], "P": [[0.0, 0.3], [0.3, 0.0]]},
        "allocator": {"kind": "bf"},
        "run": {"t_end": 1000.0, "box": 6},
    },
    "erlang2": {
        "description": "two classes on a unit link with Erlang-2 service of mean 1",
        "capacity": {"A": [[1.0, 1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.3, 0.3], "mu": [1.0, 1.0]},
        "phase_type": [
            {"alpha": [1.0, 0.0], "rates": [2.0, 2.0], "P": [[0.0, 1.0], [0.0, 0.0]]},
            {"alpha": [1.0, 0.0], "rates": [2.0, 2.0], "P": [[0.0, 1.0], [0.0, 0.0]]},
        ],
        "allocator": {"kind": "pf_prime"},
        "run": {"t_end": 1000.0, "box": 30},
    },
    "hyperexponential": {
        "description": "one class with a two-branch hyperexponential service of mean 0.75",
        "capacity": {"A": [[1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.5], "mu": [1.0]},
        "phase_type": [{"alpha": [0.5, 0.5], "rates": [1.0, 2.0]}],
        "run": {"t_end": 1000.0, "box": 30},
    },
}

BUILTIN_SPECS["fig1"] = {**BUILTIN_SPECS["two_link"], "description": "alias of two_link: two unit links, class 3 crosses both"}


def builtin_scenarios(names: Optional[Iterable[str]] = None) -> Dict[str, LoadedScenario]:
    names = list(names) if names is not None else list(BUILTIN_SPECS)
    unknown = [n for n in names if n not in BUILTIN_SPECS]
    if unknown:
        raise InvalidInputError(f"unknown built-in scenarios {unknown}")
    return {
        name: build_scenario(Scenario.model_validate({**BUILTIN_SPECS[name], "name": name}), name=name)
        for name in names
    }
