"""Multi-stage generation expansion problem.

Each stage chooses how to split the required new capacity across
technologies. Operating cost comes from merit-order dispatch over a
load-duration curve; gas and carbon prices are the only uncertain inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .mdp import ContractError, ExogenousDraw, Problem, check_shares, make_state

FUELS = ("gas", "coal", "uranium")
FEASIBILITY_TOL = 1e-9


class DatasetError(ValueError):
    """Dataset failed validation; ``line`` points at the offending JSON line."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = f"{path or '<dataset>'}:{line}: " if line is not None else f"{path or '<dataset>'}: "
        super().__init__(where + message)


class InfeasibleDispatch(RuntimeError):
    pass


@dataclass(frozen=True)
class Technology:
    name: str
    capital_cost: float
    heat_rate: float
    fuel: str
    fuel_price_fixed: float
    emission_rate: float
    variable_om: float


@dataclass(frozen=True)
class LoadBlock:
    hours: float
    base_net_demand: float


@dataclass(frozen=True)
class StageBounds:
    gas: tuple[float, float]
    carbon: tuple[float, float]


@dataclass(frozen=True, eq=False)
class GepInstance:
    technologies: tuple[Technology, ...]
    blocks: tuple[LoadBlock, ...]
    initial_capacity: tuple[float, ...]
    stage_bounds: tuple[StageBounds, ...]
    years_per_stage: float = 20.0
    growth_rate: float = 0.02
    epoch_weight: float = 20.0

    @property
    def horizon(self) -> int:
        return len(self.stage_bounds)

    @property
    def n_tech(self) -> int:
        return len(self.technologies)

    @property
    def hours(self) -> np.ndarray:
        return np.array([b.hours for b in self.blocks])

    @property
    def capital_costs(self) -> np.ndarray:
        return np.array([g.capital_cost for g in self.technologies])

    @cached_property
    def _demand_table(self) -> np.ndarray:
        table = np.array([[demand_at(self, b, t) for b in self.blocks]
                          for t in range(1, self.horizon + 1)])
        table.setflags(write=False)
        return table

    def stage_demands(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon:
            raise ContractError(f"stage {t} outside 1..{self.horizon}")
        return self._demand_table[t - 1]

    def peak_demand(self, t: int) -> float:
        return float(self.stage_demands(t).max())

    def fixed_draw(self, t: int) -> ExogenousDraw:
        b = self.stage_bounds[t - 1]
        return ExogenousDraw(b.gas[0], b.carbon[0])


def demand_at(instance: GepInstance, block: LoadBlock, t: int) -> float:
    if not 1 <= t <= instance.horizon:
        raise ContractError(f"stage {t} outside 1..{instance.horizon}")
    years = instance.years_per_stage * (t - 1)
    return block.base_net_demand * (1.0 + instance.growth_rate) ** years


def marginal_cost(tech: Technology, draw: ExogenousDraw) -> float:
    """$/MWh: fuel + carbon + variable O&M."""
    fuel_price = draw.gas_price if tech.fuel == "gas" else tech.fuel_price_fixed
    return tech.heat_rate * fuel_price + tech.emission_rate * draw.carbon_price + tech.variable_om


def marginal_costs(instance: GepInstance, draw: ExogenousDraw) -> np.ndarray:
    return np.array([marginal_cost(g, draw) for g in instance.technologies])


def required_new_capacity(instance: GepInstance, t: int, current_capacity) -> float:
    cap = np.asarray(current_capacity, dtype=float)
    if np.any(cap < 0):
        raise ContractError("capacities must be non-negative")
    return max(0.0, instance.peak_demand(t) - float(cap.sum()))


def shares_to_build(instance: GepInstance, t: int, state, action) -> np.ndarray:
    a = check_shares(action, instance.n_tech)
    cap = np.asarray(state, dtype=float)[:instance.n_tech]
    return np.maximum(a, 0.0) * required_new_capacity(instance, t, cap)


def transition(instance: GepInstance, t: int, state, action, draw: ExogenousDraw) -> np.ndarray:
    cap = np.asarray(state, dtype=float)[:instance.n_tech]
    y = shares_to_build(instance, t, state, action)
    return make_state(cap + y, draw, instance.n_tech)


@dataclass(frozen=True)
class DispatchResult:
    generation: np.ndarray  # MW, (blocks, technologies)
    operating_cost: float  # $/yr


def dispatch(capacities, costs, demands, hours) -> DispatchResult:
    """Merit-order dispatch of every block; ties go to the lower technology index."""
    cap = np.asarray(capacities, dtype=float)
    mc = np.asarray(costs, dtype=float)
    D = np.asarray(demands, dtype=float)
    H = np.asarray(hours, dtype=float)
    total = cap.sum()
    short = D - total
    bad = np.flatnonzero(short > FEASIBILITY_TOL * np.maximum(D, 1.0))
    if bad.size:
        l = int(bad[0])
        raise InfeasibleDispatch(
            f"block {l}: demand {D[l]:.6g} MW exceeds installed capacity {total:.6g} MW")
    order = np.argsort(mc, kind="stable")
    cap_sorted = cap[order]
    before = np.cumsum(cap_sorted) - cap_sorted
    gen_sorted = np.clip(D[:, None] - before[None, :], 0.0, cap_sorted[None, :])
    # float round-off shortfall goes to the last unit in merit order
    resid = D - gen_sorted.sum(axis=1)
    gen_sorted[:, -1] += np.where(resid > 0, resid, 0.0)
    gen = np.empty_like(gen_sorted)
    gen[:, order] = gen_sorted
    cost = float(np.sum(gen * mc[None, :] * H[:, None]))
    return DispatchResult(gen, cost)


def operating_costs(capacities: np.ndarray, costs: np.ndarray, demands, hours) -> np.ndarray:
    """Vectorized merit-order operating cost.

    ``capacities`` is (..., G); ``costs`` broadcasts against it. Capacity
    shortfalls are not checked here.
    """
    cap = np.asarray(capacities, dtype=float)
    mc = np.broadcast_to(np.asarray(costs, dtype=float), cap.shape)
    D = np.asarray(demands, dtype=float)
    H = np.asarray(hours, dtype=float)
    order = np.argsort(mc, axis=-1, kind="stable")
    cap_s = np.take_along_axis(cap, order, axis=-1)
    mc_s = np.take_along_axis(mc, order, axis=-1)
    before = np.cumsum(cap_s, axis=-1) - cap_s
    # (..., L, G)
    gen = np.clip(D[:, None] - before[..., None, :], 0.0, cap_s[..., None, :])
    energy = np.einsum("...lg,l->...g", gen, H)
    return np.einsum("...g,...g->...", energy, mc_s)


def stage_cost(instance: GepInstance, t: int, state, action) -> float:
    """Capital cost of the new build plus ``epoch_weight`` years of operation."""
    s = np.asarray(state, dtype=float)
    G = instance.n_tech
    y = shares_to_build(instance, t, s, action)
    draw = ExogenousDraw(float(s[G]), float(s[G + 1]))
    result = dispatch(s[:G] + y, marginal_costs(instance, draw),
                      instance.stage_demands(t), instance.hours)
    return float(instance.capital_costs @ y + instance.epoch_weight * result.operating_cost)


class GepProblem(Problem):
    """:class:`~adpqis.mdp.Problem` view of a :class:`GepInstance`."""

    def __init__(self, instance: GepInstance):
        self.instance = instance
        self.horizon = instance.horizon
        self.n_actions = instance.n_tech
        self.state_dim = instance.n_tech + 2

    def initial_state(self) -> np.ndarray:
        return make_state(self.instance.initial_capacity, self.instance.fixed_draw(1))

    def sample_exogenous(self, t: int, rng: np.random.Generator) -> ExogenousDraw:
        b = self.instance.stage_bounds[t - 1]
        gas = b.gas[0] if b.gas[0] == b.gas[1] else float(rng.uniform(*b.gas))
        carbon = b.carbon[0] if b.carbon[0] == b.carbon[1] else float(rng.uniform(*b.carbon))
        return ExogenousDraw(gas, carbon)

    def transition(self, t, state, action, draw):
        return transition(self.instance, t, state, action, draw)

    def stage_cost(self, t, state, action):
        return stage_cost(self.instance, t, state, action)

    def stage_costs(self, t, states, actions):
        inst = self.instance
        G = inst.n_tech
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        for row in a:
            check_shares(row, G)
        cap = s[:, :G]
        req = np.maximum(0.0, inst.peak_demand(t) - cap.sum(axis=1))
        y = np.maximum(a, 0.0) * req[:, None]
        after = cap + y
        D = inst.stage_demands(t)
        short = D.max() - after.sum(axis=1)
        bad = np.flatnonzero(short > FEASIBILITY_TOL * max(D.max(), 1.0))
        if bad.size:
            raise InfeasibleDispatch(f"sample {int(bad[0])}: installed capacity below peak demand")
        tech = inst.technologies
        heat = np.array([g.heat_rate for g in tech])
        gas = np.array([g.fuel == "gas" for g in tech])
        fixed = np.array([g.fuel_price_fixed for g in tech])
        emis = np.array([g.emission_rate for g in tech])
        vom = np.array([g.variable_om for g in tech])
        fuel = np.where(gas[None, :], s[:, G:G + 1], fixed[None, :])
        mc = heat * fuel + emis * s[:, G + 1:G + 2] + vom
        op = operating_costs(after, mc, D, inst.hours)
        return y @ inst.capital_costs + inst.epoch_weight * op

    def feature_bounds(self):
        inst = self.instance
        G = inst.n_tech
        widest = max(inst.stage_bounds, key=lambda b: (b.gas[1] - b.gas[0]) + (b.carbon[1] - b.carbon[0]))
        cap_hi = 4.0 * float(sum(inst.initial_capacity))
        lower = np.concatenate([np.zeros(G), [widest.gas[0], widest.carbon[0]], np.zeros(G)])
        upper = np.concatenate([np.full(G, cap_hi), [widest.gas[1], widest.carbon[1]], np.ones(G)])
        return lower, upper


# --- dataset loading -----------------------------------------------------

def default_dataset_path() -> Path:
    return Path(str(resources.files("adpqis") / "data" / "gep_default.json"))


def load_instance(path: str | Path | None = None) -> GepInstance:
    path = Path(path) if path is not None else default_dataset_path()
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset: {exc.strerror}", str(path)) from exc
    return parse_instance(text, str(path))


def parse_instance(text: str, source: str | None = None) -> GepInstance:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(exc.msg, source, exc.lineno) from exc
    return _Validator(text, source).instance(raw)


class _Validator:
    def __init__(self, text: str, source: str | None):
        self.text, self.source = text, source
        self._root = None

    def fail(self, msg: str, path: tuple):
        raise DatasetError(msg, self.source, self._line(path))

    def _line(self, path: tuple) -> int:
        if self._root is None:
            self._root = yaml.compose(self.text)
        node, line = self._root, self._root.start_mark.line
        for key in path:
            if isinstance(node, yaml.MappingNode):
                nxt = next((v for k, v in node.value if k.value == key), None)
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                nxt = node.value[key]
            else:
                nxt = None
            if nxt is None:
                break
            node, line = nxt, nxt.start_mark.line
        return line + 1

    def get(self, obj, key, path, kind=None):
        if not isinstance(obj, dict) or key not in obj:
            self.fail(f"missing key '{key}'", path)
        val = obj[key]
        if kind is not None and not isinstance(val, kind):
            self.fail(f"'{key}' must be {getattr(kind, '__name__', kind)}", path + (key,))
        return val

    def number(self, obj, key, path, minimum=0.0):
        val = self.get(obj, key, path)
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not np.isfinite(val):
            self.fail(f"'{key}' must be a finite number", path + (key,))
        if minimum is not None and val < minimum:
            self.fail(f"'{key}' must be >= {minimum}", path + (key,))
        return float(val)

    def pair(self, obj, key, path):
        val = self.get(obj, key, path, list)
        if len(val) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
            self.fail(f"'{key}' must be [lo, hi]", path + (key,))
        if val[0] > val[1]:
            self.fail(f"'{key}' bounds need lo <= hi", path + (key,))
        return float(val[0]), float(val[1])

    def instance(self, raw) -> GepInstance:
        if not isinstance(raw, dict):
            self.fail("dataset must be a JSON object", ())
        techs = []
        for i, tr in enumerate(self.get(raw, "technologies", (), list)):
            p = ("technologies", i)
            fuel = self.get(tr, "fuel", p, str)
            if fuel not in FUELS:
                self.fail(f"unknown fuel '{fuel}'", p + ("fuel",))
            techs.append(Technology(
                name=str(self.get(tr, "name", p, str)),
                capital_cost=self.number(tr, "capital_cost_per_mw", p),
                heat_rate=self.number(tr, "heat_rate", p),
                fuel=fuel,
                fuel_price_fixed=self.number(tr, "fuel_price", p),
                emission_rate=self.number(tr, "emission_rate", p),
                variable_om=self.number(tr, "variable_om", p)))
        if len(techs) < 2:
            self.fail("need at least two technologies", ("technologies",))
        blocks = []
        for i, br in enumerate(self.get(raw, "blocks", (), list)):
            p = ("blocks", i)
            hours = self.number(br, "hours", p)
            demand = self.number(br, "net_demand_mw", p)
            if hours <= 0 or demand <= 0:
                self.fail("block hours and demand must be positive", p)
            blocks.append(LoadBlock(hours, demand))
        if not blocks:
            self.fail("need at least one load block", ("blocks",))
        total_hours = sum(b.hours for b in blocks)
        if len(blocks) == 16 and abs(total_hours - 8760.0) > 1e-6:
            self.fail(f"16 blocks must cover 8760 h, got {total_hours}", ("blocks",))
        caps = self.get(raw, "initial_capacity_mw", (), list)
        if len(caps) != len(techs):
            self.fail(f"initial_capacity_mw needs {len(techs)} entries", ("initial_capacity_mw",))
        for i, c in enumerate(caps):
            if isinstance(c, bool) or not isinstance(c, (int, float)) or c < 0:
                self.fail("capacities must be non-negative numbers", ("initial_capacity_mw", i))
        bounds = []
        for i, sb in enumerate(self.get(raw, "stage_bounds", (), list)):
            p = ("stage_bounds", i)
            bounds.append(StageBounds(self.pair(sb, "gas", p), self.pair(sb, "carbon", p)))
        if not bounds:
            self.fail("need at least one stage", ("stage_bounds",))
        b1 = bounds[0]
        if b1.gas[0] != b1.gas[1] or b1.carbon[0] != b1.carbon[1]:
            self.fail("stage-1 bounds must be degenerate (lo == hi)", ("stage_bounds", 0))
        return GepInstance(
            technologies=tuple(techs),
            blocks=tuple(blocks),
            initial_capacity=tuple(float(c) for c in caps),
            stage_bounds=tuple(bounds),
            years_per_stage=self.number(raw, "years_per_stage", ()),
            growth_rate=self.number(raw, "growth_rate", (), minimum=-1.0),
            epoch_weight=self.number(raw, "epoch_weight", ()))


def instance_to_dict(instance: GepInstance) -> dict:
    return {
        "technologies": [
            {"name": g.name, "capital_cost_per_mw": g.capital_cost, "heat_rate": g.heat_rate,
             "fuel": g.fuel, "fuel_price": g.fuel_price_fixed, "emission_rate": g.emission_rate,
             "variable_om": g.variable_om} for g in instance.technologies],
        "blocks": [{"hours": b.hours, "net_demand_mw": b.base_net_demand} for b in instance.blocks],
        "initial_capacity_mw": list(instance.initial_capacity),
        "stage_bounds": [{"gas": list(b.gas), "carbon": list(b.carbon)} for b in instance.stage_bounds],
        "years_per_stage": instance.years_per_stage,
        "growth_rate": instance.growth_rate,
        "epoch_weight": instance.epoch_weight,
    }
