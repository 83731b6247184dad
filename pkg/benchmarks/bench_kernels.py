"""Compare the compiled and numpy kernel backends.

Times each convolution layer shape of the synthetic-run network
(depth 3, width 8, 100x100 output, batch 8) plus one full training step.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 8]
"""

import time

import click
import numpy as np

from dcpaseg import kernels
from dcpaseg import tensor as T
from dcpaseg.losses import soft_fbeta_loss
from dcpaseg.unet import ModelConfig, build, geometry


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_shapes(cfg, batch, output):
    """(label, x shape, w shape) for every 3x3 convolution in a forward pass."""
    x = T.Tensor(np.zeros((batch, 3) + (geometry(cfg, output).input_h,) * 2, np.float32))
    shapes = []
    original = T.conv2d

    def spy(inp, w, b):
        inp_t, w_t = T.as_tensor(inp), T.as_tensor(w)
        if w_t.shape[-1] == 3:
            shapes.append((f"{w_t.shape[1]}->{w_t.shape[0]} @{inp_t.shape[-1]}", inp_t.shape, w_t.shape))
        return original(inp, w, b)

    T.conv2d = spy
    try:
        build(cfg)(x)
    finally:
        T.conv2d = original
    return shapes


def bench_layers(shapes, repeat, rng):
    rows = []
    for label, xs, ws in shapes:
        x = rng.standard_normal(xs).astype(np.float32)
        w = (rng.standard_normal(ws) * 0.1).astype(np.float32)
        b = np.zeros(ws[0], np.float32)
        dy = rng.standard_normal(kernels.conv2d_forward(x, w, b).shape).astype(np.float32)
        row = [label]
        for name in ("cython", "numpy"):
            kernels.use(name)
            row.append(best_of(lambda: kernels.conv2d_forward(x, w, b), repeat))
            row.append(best_of(lambda: kernels.conv2d_backward(x, w, dy, True), repeat))
        rows.append(row)
    return rows


def bench_step(cfg, batch, output, repeat, rng):
    size = geometry(cfg, output).input_h
    x = rng.random((batch, 3, size, size)).astype(np.float32)
    t = (rng.random((batch, output, output)) < 0.1).astype(np.uint8)
    out = {}
    for name in ("cython", "numpy"):
        kernels.use(name)
        model = build(cfg)

        def step():
            T.backward(soft_fbeta_loss(model(x), t, 2.0))

        out[name] = best_of(step, repeat)
    return out


@click.command()
@click.option("--repeat", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--batch", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--output", default=100, show_default=True, help="Output patch side.")
def main(repeat, batch, output):
    if kernels.compiled_backend is None:
        raise click.ClickException("compiled kernels are not built; run pip install -e . first")
    cfg = ModelConfig(depth=3, base_width=8)
    rng = np.random.default_rng(0)
    previous = kernels.BACKEND_NAME
    try:
        rows = bench_layers(conv_shapes(cfg, batch, output), repeat, rng)
        step = bench_step(cfg, batch, output, max(1, repeat // 2), rng)
    finally:
        kernels.use(previous)

    click.echo(f"{'layer':<16}{'cy fwd':>9}{'cy bwd':>9}{'np fwd':>9}{'np bwd':>9}{'speedup':>9}  (ms)")
    tot_c = tot_n = 0.0
    for label, cf, cb, nf, nb in rows:
        tot_c += cf + cb
        tot_n += nf + nb
        click.echo(f"{label:<16}{cf * 1e3:9.1f}{cb * 1e3:9.1f}{nf * 1e3:9.1f}{nb * 1e3:9.1f}{(nf + nb) / (cf + cb):9.2f}")
    click.echo(f"{'3x3 total':<16}{tot_c * 1e3:18.1f}{tot_n * 1e3:18.1f}{tot_n / tot_c:9.2f}")
    click.echo(
        f"train step (batch {batch}): cython {step['cython'] * 1e3:.0f} ms, numpy {step['numpy'] * 1e3:.0f} ms, "
        f"speedup {step['numpy'] / step['cython']:.2f}"
    )


if __name__ == "__main__":
    main()
