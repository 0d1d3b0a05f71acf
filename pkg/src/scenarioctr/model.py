"""Multi-branch CTR model with an auxiliary tower and a cross-branch mutual unit.

One branch tower per scenario consumes the scenario-dependent feature vector;
an auxiliary tower consumes the scenario-independent vector and feeds each of
its hidden layers into the matching branch layer through a stop-gradient, so
shared knowledge flows into the branches but branch losses never train the
auxiliary tower. After a configurable branch layer, the mutual unit lets each
branch blend in the other branches' hidden states, weighted by cosine-derived
attention and scaled by a learned sigmoid gate. Training minimizes the sum of
the indicator-masked branch log-loss (each sample trains only the branch that
owns its scenario) and the auxiliary log-loss over all samples.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError, ShapeError
from .features import FeatureModule, FeatureSchema, NormStats
from .numerics import (
    Tensor,
    add,
    backward,
    clip,
    concat,
    cosine,
    div,
    log,
    matmul,
    mul,
    neg,
    new_param,
    relu,
    reshape,
    sigmoid,
    softmax,
    stop_gradient,
    sub,
    tsum,
    where,
    Tape,
)

PROB_EPS = 1e-7
RATIO_SUM_EPS = 1e-6
CHECKPOINT_FORMAT = "scenarioctr.checkpoint.v1"

VARIANT_KINDS = ("full", "no_gate", "no_aux", "no_gate_mut",
                 "unified_baseline", "individual_baseline")


@dataclass(frozen=True)
class VariantFlags:
    """Structural switches that define a model variant."""

    kind: str
    use_aux: bool
    use_branches: bool
    use_specific: bool
    use_mutual: bool
    gate_fixed_zero: bool = False

    def __post_init__(self):
        if self.use_mutual and not self.use_branches:
            raise ConfigError("mutual unit requires branch networks")
        if self.gate_fixed_zero and not self.use_mutual:
            raise ConfigError("a fixed-zero gate requires the mutual unit")


def make_variant(kind):
    """Resolve a variant name to its structural flags."""
    table = {
        "full": VariantFlags("full", True, True, True, True),
        "no_gate": VariantFlags("no_gate", True, True, True, True, gate_fixed_zero=True),
        "no_aux": VariantFlags("no_aux", False, True, True, True),
        "no_gate_mut": VariantFlags("no_gate_mut", False, False, True, False),
        "unified_baseline": VariantFlags("unified_baseline", False, False, False, False),
        "individual_baseline": VariantFlags("individual_baseline", False, False, False, False),
    }
    if kind not in table:
        raise ConfigError(f"unknown variant {kind!r}; expected one of {VARIANT_KINDS}")
    return table[kind]


class _Linear:
    def __init__(self, rng, in_width, out_width):
        self.w = new_param(rng, in_width, out_width)
        self.b = Tensor(np.zeros(out_width), requires_grad=True)


class AuxiliaryNetwork:
    """MLP over the scenario-independent vector with an exposed hidden stack."""

    def __init__(self, rng, in_width, hidden):
        widths = [in_width, *hidden]
        self.layers = [_Linear(rng, widths[i], widths[i + 1]) for i in range(len(hidden))]
        self.head = _Linear(rng, hidden[-1], 1)

    def params(self):
        out = {}
        for i, lin in enumerate(self.layers, start=1):
            out[f"aux.l{i}.w"] = lin.w
            out[f"aux.l{i}.b"] = lin.b
        out["aux.head.w"] = self.head.w
        out["aux.head.b"] = self.head.b
        return out


def aux_forward(aux, scenario_independent):
    """Run the auxiliary tower; returns (hidden outputs, logit, probability)."""
    if scenario_independent.shape[-1] != aux.layers[0].w.shape[0]:
        raise ConfigError(
            f"auxiliary input width {scenario_independent.shape[-1]} does not match "
            f"layer 1 width {aux.layers[0].w.shape[0]}")
    h = scenario_independent
    hiddens = []
    for lin in aux.layers:
        h = relu(add(matmul(h, lin.w), lin.b))
        hiddens.append(h)
    logit = reshape(add(matmul(h, aux.head.w), aux.head.b), (h.shape[0],))
    return hiddens, logit, sigmoid(logit)


class _BranchTower:
    def __init__(self, rng, in_width, hidden, inject_widths):
        widths = [in_width, *hidden]
        self.layers = [_Linear(rng, widths[i] + inject_widths[i], widths[i + 1])
                       for i in range(len(hidden))]
        self.head = _Linear(rng, hidden[-1], 1)


class BranchNetwork:
    """N parallel towers with identical widths and optional per-layer injection."""

    def __init__(self, rng, n_branches, in_width, hidden, inject_widths=None):
        inject_widths = inject_widths or [0] * len(hidden)
        if len(inject_widths) != len(hidden):
            raise ConfigError("injected hidden stack depth must equal branch depth")
        self.hidden = tuple(hidden)
        self.towers = [_BranchTower(rng, in_width, hidden, inject_widths)
                       for _ in range(n_branches)]

    def params(self):
        out = {}
        for i, tower in enumerate(self.towers):
            for j, lin in enumerate(tower.layers, start=1):
                out[f"branch.{i}.l{j}.w"] = lin.w
                out[f"branch.{i}.l{j}.b"] = lin.b
            out[f"branch.{i}.head.w"] = tower.head.w
            out[f"branch.{i}.head.b"] = tower.head.b
        return out


class MutualUnit:
    """Per-branch gates controlling how much each branch absorbs from the others."""

    def __init__(self, rng, n_branches, width, layer=1, gate_bias_init=-2.0):
        self.layer = layer
        self.width = width
        self.gate_w = [new_param(rng, width, 1) for _ in range(n_branches)]
        self.gate_b = [Tensor(np.full(1, gate_bias_init), requires_grad=True)
                       for _ in range(n_branches)]

    def params(self):
        out = {}
        for i in range(len(self.gate_w)):
            out[f"mutual.{i}.gate_w"] = self.gate_w[i]
            out[f"mutual.{i}.gate_b"] = self.gate_b[i]
        return out


def _mix(mutual, self_vecs, other_vecs, gate_override=None):
    """Mutual mixing over batched hidden states.

    ``self_vecs[i]`` is branch i's own hidden state (drives its gate, cosine
    similarities, and the residual term); ``other_vecs[j]`` is what branch i
    reads from branch j inside the weighted sum. Passing detached tensors in
    ``other_vecs`` is how callers keep cross-branch reads out of the backward
    pass. Returns (mixed list, alpha (B,n,n), gates (B,n)).
    """
    n = len(self_vecs)
    B, D = self_vecs[0].shape
    alpha = np.zeros((B, n, n))
    gates = np.zeros((B, n))
    mixed = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        cols = [reshape(cosine(self_vecs[i], other_vecs[j]), (B, 1)) for j in others]
        c = concat(cols, axis=1)
        csum = tsum(c, axis=1, keepdims=True)
        live = np.abs(csum.data) > RATIO_SUM_EPS
        ratios = where(live, div(c, where(live, csum, np.ones((B, 1)))), 1.0 / (n - 1))
        a = softmax(ratios, axis=1)
        if gate_override is None:
            g = sigmoid(add(matmul(self_vecs[i], mutual.gate_w[i]), mutual.gate_b[i]))
        else:
            g = Tensor(np.full((B, 1), float(gate_override)))
        stacked = concat([reshape(other_vecs[j], (B, 1, D)) for j in others], axis=1)
        mix = tsum(mul(stacked, reshape(a, (B, n - 1, 1))), axis=1)
        mixed.append(add(self_vecs[i], mul(g, mix)))
        alpha[:, i, others] = a.data
        gates[:, i] = g.data[:, 0]
    return mixed, alpha, gates


def mutual_mix(mutual, V, owner, gate_override=None, return_stats=False):
    """Mix the N branch hidden states for a forward pass owned by one branch.

    Every state except ``V[owner]`` enters as a constant, so the backward pass
    can only reach the owning branch. With fewer than two states the unit is
    bypassed. Accepts single vectors or batched (B, D) states.
    """
    n = len(V)
    if n < 2:
        return (list(V), None, None) if return_stats else list(V)
    single = V[0].ndim == 1
    vs = [reshape(v, (1, v.shape[0])) if single else v for v in V]
    guarded = [v if j == owner else stop_gradient(v) for j, v in enumerate(vs)]
    mixed, alpha, gates = _mix(mutual, guarded, guarded, gate_override)
    if single:
        mixed = [reshape(m, (m.shape[1],)) for m in mixed]
    if return_stats:
        return mixed, alpha, gates
    return mixed


def branch_forward(branches, mutual, scenario_dependent, aux_hiddens=None,
                   gate_override=None):
    """Run all branch towers on every sample.

    Layer inputs concatenate the previous branch output with the detached
    auxiliary hidden of the same depth (when provided). After the mutual
    unit's layer the hidden states are replaced by their mixed versions, with
    each branch's own state kept live and the others detached. Returns
    (per-branch logits, hidden states entering the mutual unit, alpha, gates).
    """
    depth = len(branches.hidden)
    if aux_hiddens is not None and len(aux_hiddens) != depth:
        raise ConfigError(
            f"auxiliary stack depth {len(aux_hiddens)} does not match branch depth {depth}")
    cur = [scenario_dependent] * len(branches.towers)
    hidden_at_mix = None
    alpha = gates = None
    for l in range(depth):
        nxt = []
        for i, tower in enumerate(branches.towers):
            inp = cur[i]
            if aux_hiddens is not None:
                inp = concat([inp, stop_gradient(aux_hiddens[l])], axis=1)
            lin = tower.layers[l]
            nxt.append(relu(add(matmul(inp, lin.w), lin.b)))
        cur = nxt
        if mutual is not None and mutual.layer == l + 1:
            hidden_at_mix = cur
            cur, alpha, gates = _mix(mutual, cur, [stop_gradient(v) for v in cur],
                                     gate_override)
    B = scenario_dependent.shape[0]
    logits = [reshape(add(matmul(cur[i], t.head.w), t.head.b), (B,))
              for i, t in enumerate(branches.towers)]
    return logits, hidden_at_mix, alpha, gates


@dataclass
class LossReport:
    """Scalar loss terms (as tensors, for backprop) plus batch composition."""

    target: Tensor
    aux: Tensor
    total: Tensor
    scenario_counts: np.ndarray

    def __post_init__(self):
        for name in ("target", "aux", "total"):
            v = float(getattr(self, name).data)
            if not np.isfinite(v) or v < 0.0:
                raise ContractError(f"loss term {name} is {v}, expected finite and >= 0")

    @property
    def target_value(self):
        return float(self.target.data)

    @property
    def aux_value(self):
        return float(self.aux.data)

    @property
    def total_value(self):
        return float(self.total.data)


def _log_loss_terms(p, y):
    p = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return neg(add(mul(log(p), y), mul(log(sub(1.0, p)), 1.0 - y)))


def total_loss(branch_probs, aux_prob, labels, scenario_ids, num_scenarios,
               denom=None):
    """Indicator-masked branch loss plus the auxiliary loss.

    ``branch_probs`` is (B, N) (each sample contributes only its own
    scenario's column) or (B,) for single-tower variants. ``aux_prob`` may be
    None, in which case the auxiliary term is zero. ``denom`` overrides the
    averaging denominator of both terms (defaults to the batch size).
    """
    labels = np.asarray(labels, dtype=np.float64)
    scenario_ids = np.asarray(scenario_ids)
    B = len(labels)
    if B == 0:
        raise ContractError("total_loss needs a nonempty batch")
    if scenario_ids.min() < 0 or scenario_ids.max() >= num_scenarios:
        raise DataFormatError(
            f"scenario id {int(scenario_ids.max())} out of range [0, {num_scenarios})")
    denom = float(B if denom is None else denom)
    if branch_probs.ndim == 2:
        onehot = np.zeros((B, branch_probs.shape[1]))
        onehot[np.arange(B), scenario_ids] = 1.0
        own_p = tsum(mul(branch_probs, onehot), axis=1)
    else:
        own_p = branch_probs
    target = mul(tsum(_log_loss_terms(own_p, labels)), 1.0 / denom)
    if aux_prob is not None:
        aux = mul(tsum(_log_loss_terms(aux_prob, labels)), 1.0 / denom)
    else:
        aux = Tensor(0.0)
    counts = np.bincount(scenario_ids, minlength=num_scenarios)
    return LossReport(target=target, aux=aux, total=add(target, aux),
                      scenario_counts=counts)


@dataclass
class ModelOutput:
    probs: Tensor  # (B, N) per-branch, or (B,) for single-tower variants
    aux_prob: Tensor
    hidden_at_mix: list
    alpha: np.ndarray
    gates: np.ndarray


class ScenarioModel:
    """Feature module plus the variant-selected prediction towers."""

    def __init__(self, schema, flags, rng, hidden=(128, 64), heads=4,
                 mutual_layer=1, gate_bias_init=-2.0):
        if isinstance(flags, str):
            flags = make_variant(flags)
        if not hidden:
            raise ConfigError("need at least one hidden layer")
        if not 1 <= mutual_layer <= len(hidden):
            raise ConfigError(
                f"mutual_layer {mutual_layer} outside [1, {len(hidden)}]")
        self.schema = schema
        self.flags = flags
        self.hidden = tuple(hidden)
        self.heads = heads
        self.mutual_layer = mutual_layer
        self.gate_bias_init = gate_bias_init
        self.features = FeatureModule(schema, rng, heads=heads,
                                      with_specific=flags.use_specific)
        self.aux = None
        self.branches = None
        self.mutual = None
        self.tower = None
        N = schema.num_scenarios
        if flags.use_aux:
            self.aux = AuxiliaryNetwork(rng, schema.independent_width, hidden)
        if flags.use_branches:
            in_width = schema.dependent_width
            inject = list(hidden) if flags.use_aux else None
            if not flags.use_aux:
                in_width += schema.independent_width
            self.branches = BranchNetwork(rng, N, in_width, hidden, inject)
            if flags.use_mutual:
                self.mutual = MutualUnit(rng, N, hidden[mutual_layer - 1],
                                         layer=mutual_layer,
                                         gate_bias_init=gate_bias_init)
        else:
            in_width = schema.independent_width
            if flags.use_specific:
                in_width += schema.dependent_width
            self.tower = _BranchTower(rng, in_width, hidden, [0] * len(hidden))

    def params(self):
        out = dict(self.features.params())
        if self.aux is not None:
            out.update(self.aux.params())
        if self.branches is not None:
            out.update(self.branches.params())
        if self.mutual is not None:
            out.update(self.mutual.params())
        if self.tower is not None:
            for j, lin in enumerate(self.tower.layers, start=1):
                out[f"tower.l{j}.w"] = lin.w
                out[f"tower.l{j}.b"] = lin.b
            out["tower.head.w"] = self.tower.head.w
            out["tower.head.b"] = self.tower.head.b
        return out

    def forward(self, batch, gate_override=None):
        if self.flags.gate_fixed_zero:
            gate_override = 0.0
        indep, dep = self.features.forward(batch)
        aux_hiddens = aux_prob = None
        if self.aux is not None:
            aux_hiddens, _, aux_prob = aux_forward(self.aux, indep)
        if self.branches is not None:
            branch_in = dep if self.flags.use_aux else concat([dep, indep], axis=1)
            logits, hidden_at_mix, alpha, gates = branch_forward(
                self.branches, self.mutual, branch_in, aux_hiddens, gate_override)
            B = batch.n
            probs = concat([reshape(sigmoid(lg), (B, 1)) for lg in logits], axis=1)
            return ModelOutput(probs=probs, aux_prob=aux_prob,
                               hidden_at_mix=hidden_at_mix, alpha=alpha, gates=gates)
        x = concat([indep, dep], axis=1) if dep is not None else indep
        h = x
        for lin in self.tower.layers:
            h = relu(add(matmul(h, lin.w), lin.b))
        logit = reshape(add(matmul(h, self.tower.head.w), self.tower.head.b),
                        (batch.n,))
        return ModelOutput(probs=sigmoid(logit), aux_prob=None,
                           hidden_at_mix=None, alpha=None, gates=None)

    def loss(self, batch, gate_override=None, denom=None):
        out = self.forward(batch, gate_override=gate_override)
        report = total_loss(out.probs, out.aux_prob, batch.label, batch.scenario,
                            self.schema.num_scenarios, denom=denom)
        return out, report

    def absent_branch_params(self, scenario_ids):
        """Parameters owned by branches with no samples in this batch."""
        if self.branches is None:
            return set()
        present = set(int(s) for s in np.unique(scenario_ids))
        skip = set()
        for i, tower in enumerate(self.branches.towers):
            if i in present:
                continue
            for lin in tower.layers:
                skip.add(lin.w)
                skip.add(lin.b)
            skip.add(tower.head.w)
            skip.add(tower.head.b)
            if self.mutual is not None:
                skip.add(self.mutual.gate_w[i])
                skip.add(self.mutual.gate_b[i])
        return skip

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state(self, state):
        params = self.params()
        for name, p in params.items():
            if name not in state:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} "
                    f"does not match model shape {p.data.shape}")
            p.data[...] = arr

    def save(self, path, norm_stats=None, extra=None):
        meta = {
            "format": CHECKPOINT_FORMAT,
            "schema": self.schema.to_dict(),
            "schema_digest": self.schema.digest(),
            "variant": self.flags.kind,
            "hidden": list(self.hidden),
            "heads": self.heads,
            "mutual_layer": self.mutual_layer,
            "gate_bias_init": self.gate_bias_init,
            "norm_stats": (norm_stats or NormStats()).to_dict(),
        }
        if extra:
            meta["extra"] = extra
        np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 **self.state_dict())

    @classmethod
    def load(cls, path):
        """Rebuild a model (and its normalization stats) from a checkpoint."""
        with np.load(path, allow_pickle=False) as f:
            if "__meta__" not in f:
                raise DataFormatError(f"{path}: not a model checkpoint")
            meta = json.loads(str(f["__meta__"][()]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise DataFormatError(
                    f"{path}: unsupported checkpoint format {meta.get('format')!r}")
            schema = FeatureSchema.from_dict(meta["schema"])
            model = cls(schema, make_variant(meta["variant"]),
                        np.random.default_rng(0), hidden=tuple(meta["hidden"]),
                        heads=meta["heads"], mutual_layer=meta["mutual_layer"],
                        gate_bias_init=meta["gate_bias_init"])
            state = {k: f[k] for k in f.files if k != "__meta__"}
            model.load_state(state)
            stats = NormStats.from_dict(meta["norm_stats"])
        return model, stats


def predict(model, batch):
    """Probability of the owning branch for every sample, as a plain array."""
    out = model.forward(batch)
    probs = out.probs.data
    if probs.ndim == 2:
        return probs[np.arange(batch.n), batch.scenario].copy()
    return probs.copy()


def train_step(model, batch, optimizer, denom=None):
    """One forward/backward/update cycle on an encoded batch.

    Embedding tables move only on the rows the batch touched; towers of
    scenarios absent from the batch (and their gates) are skipped outright, so
    their parameters and optimizer moments stay bit-identical.
    """
    with Tape() as tape:
        _, report = model.loss(batch, denom=denom)
    grads = backward(tape, report.total)
    optimizer.step(grads,
                   rows=model.features.touched_rows(batch),
                   skip=model.absent_branch_params(batch.scenario))
    return report
