"""Small building blocks shared by the encoder and decoder."""

from __future__ import annotations

from . import autodiff as ad
from .optim import ParamStore


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
    store.weight(f"{name}.w", fan_in, fan_out)
    if bias:
        store.bias(f"{name}.b", fan_out)


def linear(params, name: str, x):
    y = ad.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y if b is None else ad.add(y, b)


def init_mlp(store: ParamStore, name: str, sizes: list[int]) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(store, f"{name}.{i}", a, b)


def mlp(params, name: str, x, n_layers: int, final_relu: bool = False):
    """Linear layers with ReLU between them (and after the last if ``final_relu``)."""
    for i in range(n_layers):
        x = linear(params, f"{name}.{i}", x)
        if i < n_layers - 1 or final_relu:
            x = ad.relu(x)
    return x


def init_gru(store: ParamStore, name: str, n_in: int, hidden: int) -> None:
    store.weight(f"{name}.w_x", n_in, 3 * hidden)
    store.weight(f"{name}.w_h", hidden, 3 * hidden)
    store.bias(f"{name}.b_x", 3 * hidden)
    store.bias(f"{name}.b_h", 3 * hidden)


def gru(params, name: str, x, h):
    return ad.gru_cell(x, h, params[f"{name}.w_x"], params[f"{name}.w_h"],
                       params[f"{name}.b_x"], params[f"{name}.b_h"])
