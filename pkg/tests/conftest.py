"""Shared fixtures: schemas, record factories, and the end-to-end FD harness."""

import numpy as np

# Verdict lines pushed by the acceptance tests; echoed after the run so they
# survive pytest's output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance report")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from scenarioctr.features import (
    EncodedDataset,
    ExampleRecord,
    FeatureSchema,
    FieldSpec,
    encode_record,
)
from scenarioctr.model import _mix, aux_forward, total_loss
from scenarioctr.numerics import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    matmul,
    max_rel_error,
    numeric_grad,
    relu,
    reshape,
    sigmoid,
)


def small_schema(**overrides):
    fields = [
        FieldSpec("scenario", "Context", "categorical", vocab_size=3),
        FieldSpec("user_id", "UserProfile", "categorical", vocab_size=50),
        FieldSpec("item_id", "ItemProfile", "categorical", vocab_size=40),
        FieldSpec("age", "UserProfile", "numerical"),
        FieldSpec("behavior", "UserBehavior", "sequence", vocab_size=40),
    ]
    kw = dict(fields=fields, num_scenarios=3, scenario_field="scenario",
              global_dim=8, specific_dim=4, max_seq_len=5)
    kw.update(overrides)
    return FeatureSchema(**kw)


def tiny_schema(**overrides):
    """Minimal two-scenario schema for end-to-end gradient checks."""
    fields = [
        FieldSpec("scenario", "Context", "categorical", vocab_size=2),
        FieldSpec("item_id", "ItemProfile", "categorical", vocab_size=3),
        FieldSpec("behavior", "UserBehavior", "sequence", vocab_size=3),
    ]
    kw = dict(fields=fields, num_scenarios=2, scenario_field="scenario",
              global_dim=4, specific_dim=2, max_seq_len=3)
    kw.update(overrides)
    return FeatureSchema(**kw)


def make_record(rng, schema, scenario=None, seq_len=None):
    L = schema.max_seq_len
    n = int(rng.integers(0, L + 1)) if seq_len is None else seq_len
    cat = {}
    for f in schema.categorical_fields:
        if f.name != schema.scenario_field:
            cat[f.name] = int(rng.integers(0, f.vocab_size))
    num = {f.name: float(rng.normal(35, 10)) for f in schema.numerical_fields}
    beh = {f.name: [int(rng.integers(0, f.vocab_size)) for _ in range(n)]
           for f in schema.sequence_fields}
    return ExampleRecord(
        categorical=cat, numerical=num, behavior=beh,
        scenario_id=(int(rng.integers(0, schema.num_scenarios))
                     if scenario is None else scenario),
        label=int(rng.integers(0, 2)),
    )


def encode_batch(schema, records, stats=None):
    return EncodedDataset.stack(schema, [encode_record(schema, r, stats) for r in records])


def surrogate_fd_error(model, batch, h=1e-5):
    """Finite-difference check of a full model's analytic gradients.

    The model's detached edges (auxiliary hiddens injected into branch layers,
    cross-branch states read by the mutual unit) are constants as far as the
    backward pass is concerned, so plain finite differences of the real
    forward would disagree by construction. This harness freezes those inputs
    at their base-point values and differentiates the resulting surrogate,
    which is exactly the function the analytic gradients claim to
    differentiate. Returns the worst relative error over all parameters.
    """
    depth = len(model.hidden)
    N = model.schema.num_scenarios
    B = batch.n

    with Tape() as tape:
        _, report = model.loss(batch)
    grads = backward(tape, report.total)
    base_total = report.total_value

    def branch_stage(dep, indep, aux_const, v_const):
        branch_in = dep if model.flags.use_aux else concat([dep, indep], axis=1)
        cur = [branch_in] * N
        captured = None
        for l in range(depth):
            nxt = []
            for i, tower in enumerate(model.branches.towers):
                inp = cur[i]
                if aux_const is not None:
                    inp = concat([inp, aux_const[l]], axis=1)
                lin = tower.layers[l]
                nxt.append(relu(add(matmul(inp, lin.w), lin.b)))
            cur = nxt
            if model.mutual is not None and model.mutual.layer == l + 1:
                captured = cur
                if v_const is None:
                    return captured, None  # caller only wants the base states
                cur, _, _ = _mix(model.mutual, cur, v_const)
        logits = [reshape(add(matmul(cur[i], t.head.w), t.head.b), (B,))
                  for i, t in enumerate(model.branches.towers)]
        return captured, logits

    # Freeze the detached inputs at the base point.
    indep0, dep0 = model.features.forward(batch)
    aux_const = None
    if model.aux is not None:
        hiddens, _, _ = aux_forward(model.aux, indep0)
        aux_const = [Tensor(t.data.copy()) for t in hiddens]
    v_const = None
    if model.mutual is not None:
        captured, _ = branch_stage(dep0, indep0, aux_const, None)
        v_const = [Tensor(t.data.copy()) for t in captured]

    def fixed_loss():
        indep, dep = model.features.forward(batch)
        aux_prob = None
        if model.aux is not None:
            _, _, aux_prob = aux_forward(model.aux, indep)
        _, logits = branch_stage(dep, indep, aux_const, v_const)
        probs = concat([reshape(sigmoid(lg), (B, 1)) for lg in logits], axis=1)
        rep = total_loss(probs, aux_prob, batch.label, batch.scenario, N)
        return rep.total_value

    assert fixed_loss() == base_total  # surrogate agrees at the base point
    worst = 0.0
    for p in model.params().values():
        numeric = numeric_grad(fixed_loss, p.data, h=h)
        worst = max(worst, max_rel_error(grads.get(p), numeric))
    return worst
