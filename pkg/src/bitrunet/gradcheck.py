"""Finite-difference verification of every differentiable kernel.

``finite_difference_grad`` is the independent oracle: central differences,
element by element, 64-bit. ``run_op_suite`` drives it over randomized
instances of each op and reports the worst relative error per op; the
``gradcheck`` CLI subcommand and the acceptance tests both call it.
"""

import numpy as np

from . import tensor as T


def finite_difference_grad(f, x, h=1e-4):
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``f`` is called with ``x`` after each in-place perturbation of
    ``x.data`` and must return a float (or scalar Tensor). The data buffer
    is restored before returning.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = x.data.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _value(f(x))
        flat[i] = orig - h
        fm = _value(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def _value(v):
    return v.item() if isinstance(v, T.Tensor) else float(v)


def relative_error(analytic, fd):
    scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-10)
    return float(np.abs(analytic - fd).max() / scale)


def check_gradients(inputs, forward, h=1e-4):
    """Max relative error between tape gradients and finite differences.

    ``forward`` recomputes a scalar Tensor from the current contents of the
    ``inputs`` tensors, so the same closure serves both the analytic pass
    (under a tape) and the perturbed finite-difference evaluations (tape-free).
    """
    for t in inputs:
        t.zero_grad()
    with T.Tape() as tape:
        tape_loss = forward()
        tape.backward(tape_loss)
    worst = 0.0
    for t in inputs:
        if t.grad is None:
            raise AssertionError("input received no gradient")
        fd = finite_difference_grad(lambda _: forward(), t, h)
        worst = max(worst, relative_error(t.grad, fd))
    return worst


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _rand_away_from_zero(rng, shape, margin=0.1):
    d = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return T.Tensor(d, requires_grad=True)


def _probe(rng, out):
    # fixed random linear functional makes the upstream gradient non-uniform
    r = T.Tensor(rng.standard_normal(out))
    return lambda y: T.tsum(T.mul(y, r))


def _suite_builders():
    """name -> builder(rng) -> (inputs, forward)."""

    def b_add(rng):
        a, b = _rand(rng, (3, 4)), _rand(rng, (4,))
        p = _probe(rng, (3, 4))
        return [a, b], lambda: p(T.add(a, b))

    def b_sub(rng):
        a, b = _rand(rng, (2, 3, 4)), _rand(rng, (3, 1))
        p = _probe(rng, (2, 3, 4))
        return [a, b], lambda: p(T.sub(a, b))

    def b_mul(rng):
        a, b = _rand(rng, (3, 4)), _rand(rng, (3, 1))
        p = _probe(rng, (3, 4))
        return [a, b], lambda: p(T.mul(a, b))

    def b_div(rng):
        a = _rand(rng, (3, 4))
        b = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        p = _probe(rng, (3, 4))
        return [a, b], lambda: p(T.div(a, b))

    def b_matmul(rng):
        a, b = _rand(rng, (4, 5)), _rand(rng, (5, 3))
        p = _probe(rng, (4, 3))
        return [a, b], lambda: p(T.matmul(a, b))

    def b_matmul_batched(rng):
        a, b = _rand(rng, (2, 3, 4)), _rand(rng, (2, 4, 5))
        p = _probe(rng, (2, 3, 5))
        return [a, b], lambda: p(T.matmul(a, b))

    def b_relu(rng):
        x = _rand_away_from_zero(rng, (4, 5))
        p = _probe(rng, (4, 5))
        return [x], lambda: p(T.relu(x))

    def b_gelu(rng):
        x = _rand(rng, (4, 5), -2.0, 2.0)
        p = _probe(rng, (4, 5))
        return [x], lambda: p(T.gelu(x))

    def b_sigmoid(rng):
        x = _rand(rng, (4, 5), -3.0, 3.0)
        p = _probe(rng, (4, 5))
        return [x], lambda: p(T.sigmoid(x))

    def b_exp(rng):
        x = _rand(rng, (3, 4))
        p = _probe(rng, (3, 4))
        return [x], lambda: p(T.exp(x))

    def b_log(rng):
        x = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        p = _probe(rng, (3, 4))
        return [x], lambda: p(T.log(x))

    def b_softmax(rng):
        x = _rand(rng, (3, 5), -2.0, 2.0)
        p = _probe(rng, (3, 5))
        return [x], lambda: p(T.softmax(x, axis=-1))

    def b_layer_norm(rng):
        x = _rand(rng, (3, 6))
        g = T.Tensor(rng.uniform(0.5, 1.5, (6,)), requires_grad=True)
        b = _rand(rng, (6,))
        p = _probe(rng, (3, 6))
        return [x, g, b], lambda: p(T.layer_norm(x, g, b))

    def b_conv3d_s1(rng):
        spec = T.ConvSpec(2, 3, stride=1, padding=1)
        x = _rand(rng, (1, 2, 4, 3, 5))
        w = _rand(rng, (3, 2, 3, 3, 3), -0.5, 0.5)
        bias = _rand(rng, (3,))
        p = _probe(rng, (1, 3, 4, 3, 5))
        return [x, w, bias], lambda: p(T.conv3d(x, spec, w, bias))

    def b_conv3d_s2(rng):
        spec = T.ConvSpec(2, 2, stride=2, padding=1)
        x = _rand(rng, (2, 2, 4, 4, 5))
        w = _rand(rng, (2, 2, 3, 3, 3), -0.5, 0.5)
        bias = _rand(rng, (2,))
        p = _probe(rng, (2, 2, 2, 2, 3))
        return [x, w, bias], lambda: p(T.conv3d(x, spec, w, bias))

    def b_conv_transpose_s2(rng):
        spec = T.ConvSpec(3, 2, stride=2, padding=1, transposed=True)
        x = _rand(rng, (1, 3, 2, 3, 2))
        w = _rand(rng, (3, 2, 3, 3, 3), -0.5, 0.5)
        bias = _rand(rng, (2,))
        p = _probe(rng, (1, 2, 4, 6, 4))
        return [x, w, bias], lambda: p(T.conv_transpose3d(x, spec, w, bias))

    def b_conv_transpose_s1(rng):
        spec = T.ConvSpec(2, 2, stride=1, padding=1, transposed=True)
        x = _rand(rng, (1, 2, 3, 4, 3))
        w = _rand(rng, (2, 2, 3, 3, 3), -0.5, 0.5)
        bias = _rand(rng, (2,))
        p = _probe(rng, (1, 2, 3, 4, 3))
        return [x, w, bias], lambda: p(T.conv_transpose3d(x, spec, w, bias))

    def b_avg_pool(rng):
        x = _rand(rng, (2, 3, 3, 2, 4))
        p = _probe(rng, (2, 3, 1, 1, 1))
        return [x], lambda: p(T.global_avg_pool(x))

    def b_max_pool(rng):
        x = _rand(rng, (2, 3, 3, 2, 4))
        p = _probe(rng, (2, 3, 1, 1, 1))
        return [x], lambda: p(T.global_max_pool(x))

    def b_concat(rng):
        a, b = _rand(rng, (1, 2, 3, 3, 3)), _rand(rng, (1, 3, 3, 3, 3))
        p = _probe(rng, (1, 5, 3, 3, 3))
        return [a, b], lambda: p(T.concat([a, b], axis=1))

    def b_flip(rng):
        x = _rand(rng, (1, 2, 3, 4, 3))
        p = _probe(rng, (1, 2, 3, 4, 3))
        return [x], lambda: p(T.flip(x, (2, 4)))

    def b_reshape(rng):
        x = _rand(rng, (2, 3, 4))
        p = _probe(rng, (6, 4))
        return [x], lambda: p(T.reshape(x, (6, 4)))

    def b_transpose(rng):
        x = _rand(rng, (2, 3, 4))
        p = _probe(rng, (2, 4, 3))
        return [x], lambda: p(T.transpose_last2(x))

    def b_sum_axis(rng):
        x = _rand(rng, (3, 4, 2))
        p = _probe(rng, (3, 2))
        return [x], lambda: p(T.tsum(x, axis=1))

    def b_max_axis(rng):
        x = _rand(rng, (3, 4, 2))
        p = _probe(rng, (3, 1, 2))
        return [x], lambda: p(T.tmax(x, axis=1, keepdims=True))

    def b_mean(rng):
        x = _rand(rng, (3, 4))
        return [x], lambda: T.tmean(T.mul(x, x))

    return {
        "add": b_add,
        "sub": b_sub,
        "mul": b_mul,
        "div": b_div,
        "matmul": b_matmul,
        "matmul_batched": b_matmul_batched,
        "relu": b_relu,
        "gelu": b_gelu,
        "sigmoid": b_sigmoid,
        "exp": b_exp,
        "log": b_log,
        "softmax": b_softmax,
        "layer_norm": b_layer_norm,
        "conv3d_stride1": b_conv3d_s1,
        "conv3d_stride2": b_conv3d_s2,
        "conv_transpose3d_stride2": b_conv_transpose_s2,
        "conv_transpose3d_stride1": b_conv_transpose_s1,
        "global_avg_pool": b_avg_pool,
        "global_max_pool": b_max_pool,
        "concat": b_concat,
        "flip": b_flip,
        "reshape": b_reshape,
        "transpose_last2": b_transpose,
        "sum_axis": b_sum_axis,
        "max_axis": b_max_axis,
        "mean": b_mean,
    }


def run_op_suite(instances=20, seed=0, h=1e-4):
    """Per-op worst relative error over ``instances`` random instances."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, builder in _suite_builders().items():
        worst = 0.0
        for _ in range(instances):
            inputs, forward = builder(rng)
            worst = max(worst, check_gradients(inputs, forward, h))
        results[name] = worst
    return results


def check_model_gradients(model, x, samples=50, seed=0, h=1e-6):
    """Spot-check tape gradients of a full model against finite differences.

    Perturbs ``samples`` randomly chosen parameter scalars. The loss is a
    fixed random linear functional (mean-scaled) of the forward output.
    Per-scalar error is |analytic - fd| / max(|fd|, |analytic|, 1e-3), the
    floor absorbing finite-difference noise on near-zero gradients.

    The network is only piecewise smooth (relu, max pooling), so a sample
    occasionally lands within the step of a kink where central differences
    straddle two branches. A genuinely wrong backward rule disagrees at
    every step size; a kink artifact vanishes once the step is inside the
    smooth piece. Each suspicious sample is therefore retried with smaller
    steps and its error is the minimum over the cascade. Returns the worst
    per-sample error.
    """
    rng = np.random.default_rng(seed)
    probe_data = rng.standard_normal(
        (x.shape[0], model.config.num_classes) + tuple(x.shape[2:])
    )
    # a mean keeps the loss O(1): the finite-difference noise floor scales
    # with the loss value, so a sum over all voxels would drown the signal
    probe = T.Tensor(probe_data.astype(model.dtype))

    def loss_value():
        return T.tmean(T.mul(model.forward(x), probe)).item()

    model.zero_grads()
    with T.Tape() as tape:
        tape.backward(T.tmean(T.mul(model.forward(x), probe)))
    names = list(model.params)
    worst = 0.0
    for _ in range(samples):
        t = model.params[names[rng.integers(len(names))]]
        i = int(rng.integers(t.size))
        flat = t.data.reshape(-1)
        orig = flat[i]
        ga = float(t.grad.reshape(-1)[i])

        def err_at(step):
            flat[i] = orig + step
            fp = loss_value()
            flat[i] = orig - step
            fm = loss_value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            return abs(ga - fd) / max(abs(fd), abs(ga), 1e-3)

        err = err_at(h)
        for smaller in (h / 10.0, h / 100.0):
            if err < 1e-5:
                break
            err = min(err, err_at(smaller))
        worst = max(worst, err)
    return worst
