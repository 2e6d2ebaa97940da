"""Finite-difference checks over every trainable module on small seeded configs.

Each check builds a scalar loss (a fixed random projection of the module's
outputs, or the module's own training loss) and compares reverse-mode
gradients of all parameters with central differences.
"""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from . import tensor as tc
from .brm import BrmConfig, BrmModel, brm_forward_and_loss
from .errors import DegenerateInputError
from .gradcheck import GradCheckReport, check_gradients, relu_margin
from .lgte import LgteConfig, LgteStack
from .mgfn import MdcmBlock, MdcmConfig, cascade_forward, mdcm_forward, mdcm_loss
from .params import ParamStore
from .tbr import Proposal, TbrConfig, TbrStage, realized_tiou, run_stage, tbr_loss
from .transfer import mmd

EPS = 1e-4
RTOL = 1e-3
KINK_MARGIN = 1e-3
MAX_DRAWS = 50


def _projected(out, rng) -> Callable:
    weights = rng.normal(size=out.shape)
    return lambda t: tc.tsum(tc.mul(t, weights))


def _tensorcore(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    k = store.create("conv.w", (3, 4, 5), 12, rng)
    w = store.create("lin.w", (5, 3), 5, rng)
    b = store.create("lin.b", (3,), 5, rng)
    gain = store.add("ln.gain", tc.Tensor(rng.uniform(0.5, 1.5, size=5), requires_grad=True))
    bias = store.add("ln.bias", tc.Tensor(rng.normal(size=5), requires_grad=True))
    x = rng.normal(size=(10, 4))
    target = rng.normal(size=(10, 3))

    def loss():
        h = tc.conv1d(tc.pad_time(x, 1, 1), k, dilation=2, padding=1)
        h = tc.relu(tc.layer_norm(h, gain, bias))
        y = tc.linear(h, w, b)
        attn = tc.softmax(tc.matmul(y, tc.transpose(y)), axis=-1, scale=2.0)
        z = tc.concat([tc.matmul(attn, y), tc.sigmoid(y)], axis=1)
        pooled = tc.global_avg_pool(z)
        fit = tc.mean(tc.smooth_l1(tc.sub(y, target)))
        return tc.add(fit, tc.tsum(tc.log(tc.add(tc.exp(pooled), 1.0))))

    return loss, store


def _lgte(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    stack = LgteStack(LgteConfig(8, groups=4, local_groups=2, window=3, layers=2), store, rng)
    F = rng.normal(size=(10, 8))
    proj = _projected(stack(F), rng)
    return lambda: proj(stack(F)), store


def _tbr(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    stage = TbrStage(TbrConfig(4, hidden=6), store, "tbr", rng)
    F = rng.normal(size=(24, 4))
    props = [Proposal(3.3, 11.7), Proposal(9.1, 20.4), Proposal(0.6, 5.2)]
    gts = [(4.0, 12.0), (10.0, 19.0), None]
    target = realized_tiou(run_stage(F, props, stage), gts)
    return lambda: tbr_loss(run_stage(F, props, stage), props, gts, target), store


def _mdcm(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    block = MdcmBlock(MdcmConfig(4, 3, width=6, rates=(1, 2, 3)), store, "mdcm", rng)
    F = rng.normal(size=(2, 12, 4))
    labels = np.array([[1, 0, 0], [0, 1, 1]], dtype=float)
    proj = _projected(mdcm_forward(F, block).cas, rng)
    return lambda: tc.add(mdcm_loss(mdcm_forward(F, block), labels),
                          tc.scale(proj(mdcm_forward(F, block).cas), 0.1)), store


def _cascade(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    cfg = MdcmConfig(4, 3, width=6, rates=(1, 2))
    s1 = MdcmBlock(cfg, store, "stage1", rng)
    s2 = MdcmBlock(cfg, store, "stage2", rng)
    F = rng.normal(size=(12, 4))
    labels = np.array([0.0, 1.0, 0.0])
    proj = _projected(cascade_forward(F, s1, s2, labels).cas, rng)
    return lambda: proj(cascade_forward(F, s1, s2, labels).cas), store


def _brm(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    model = BrmModel(BrmConfig(4, width=6, scales=(3.0, 6.0)), store, rng)
    # random prediction weights so the boundaries actually move
    for name in ("brm.pred.w", "brm.pred.b"):
        store[name].data[...] = rng.uniform(-0.2, 0.2, size=store[name].shape)
    F = rng.normal(size=(16, 4))
    cas = rng.uniform(size=(16, 2))
    labels = np.array([1.0, 1.0])

    def loss():
        _, value = brm_forward_and_loss(F, cas, labels, model)
        return value

    return loss, store


def _mmd(seed) -> Tuple[Callable, ParamStore]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    X = store.add("x", tc.Tensor(rng.normal(size=(6, 3)), requires_grad=True))
    Y = rng.normal(loc=0.5, size=(5, 3))
    bandwidths = [0.8, 1.6, 3.2]
    return lambda: mmd(X, Y, bandwidths), store


MODULE_CHECKS: Dict[str, Callable[..., Tuple[Callable, ParamStore]]] = {
    "tensorcore": _tensorcore,
    "lgte_stack": _lgte,
    "tbr": _tbr,
    "mdcm": _mdcm,
    "cascade": _cascade,
    "brm_oic": _brm,
    "mmd": _mmd,
}


def build_away_from_kinks(build, seed: int, margin: float = KINK_MARGIN):
    """First deterministic draw ``[seed, k]`` whose ReLU inputs all clear ``margin``."""
    for k in range(MAX_DRAWS):
        f, store = build([seed, k])
        if relu_margin(f()) >= margin:
            return f, store
    raise DegenerateInputError(f"no draw within {MAX_DRAWS} tries keeps ReLU inputs {margin} from 0")


def run_module_checks(seed: int = 0, max_coords: int = 40, eps: float = EPS,
                      rtol: float = RTOL) -> Dict[str, GradCheckReport]:
    """One report per module; at most ``max_coords`` coordinates per tensor."""
    reports = {}
    for name, build in MODULE_CHECKS.items():
        f, store = build_away_from_kinks(build, seed)
        reports[name] = check_gradients(f, store, eps=eps, rtol=rtol, max_coords=max_coords,
                                        rng=np.random.default_rng([seed, 1]))
    return reports
