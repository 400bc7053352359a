import pytest

from mfg_moments import scenario_from_dict


def make_doc(
    a=0.0, b=0.0, c=0.0,
    A_T=0.0, B_T=0.0, C_T=0.0,
    T=1.0, delta=0.0, lam=0.0, jump=None,
    x0=0.0, v0=0.0, n=1, meanfield=None,
):
    cost = {"a": a, "c": c}
    if meanfield is not None:
        cost["meanfield"] = meanfield
    else:
        cost["b"] = b
    doc = {
        "dimension": n,
        "T": T,
        "delta": delta,
        "lambda": lam,
        "cost": cost,
        "terminal": {"A_T": A_T, "B_T": B_T, "C_T": C_T},
        "initial": {"kind": "gaussian" if v0 > 0 else "dirac", "x0": x0, "v0": v0},
    }
    if jump is not None:
        doc["jump"] = jump
    return doc


def make_spec(**kwargs):
    return scenario_from_dict(make_doc(**kwargs))


@pytest.fixture
def brownian_spec():
    return make_spec(delta=1.0)


@pytest.fixture
def pure_jump_spec():
    return make_spec(lam=2.0, jump={"type": "point", "params": {"z0": 1.0}})


@pytest.fixture
def constant_A_spec():
    # a = -2 with A_T = 1 sits on the Riccati equilibrium, so A(t) = 1.
    return make_spec(a=-2.0, A_T=1.0, x0=1.0, v0=1.0)
