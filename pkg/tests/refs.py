"""Independent reference loops used as oracles by the meta-engine tests.

They share only the numeric kernels of ``diff_core`` with the package and
re-derive the sampling schedule (stock order, span offsets) by hand.
"""
import numpy as np

from dpml.diff_core import MlpSpec, linear_params, make_rng, mlp_forward, mlp_grad, mlp_init
from dpml.market_data import InstanceSet, SynthConfig, build_instances, default_boundaries, fit_norm_stats, \
    normalize_tasks, split_tasks, synth_generate


def small_tasks(n_stocks=3, n_days=40, spd=20, seed=0, **synth):
    panel = synth_generate(SynthConfig(n_stocks=n_stocks, n_days=n_days, slots_per_day=spd, **synth), seed)
    tasks = split_tasks(build_instances(panel), default_boundaries(panel.day)).tasks
    norm = fit_norm_stats(InstanceSet.concat([t.train for t in tasks]))
    return normalize_tasks(tasks, norm), norm, tasks


def span_start(rng, n, batch):
    return 0 if n <= batch else int(rng.integers(0, n - batch + 1))


def reptile_reference(tasks, *, lr, gamma, batch, spans, epochs, seed):
    """First-order Reptile on a global linear predictor.

    Per epoch the stocks are visited in a random order; each visit copies the
    global parameters, takes ``spans`` SGD steps on random contiguous windows
    of the stock's train split and moves the global parameters toward the
    copy by ``gamma``. Returns the global (w, b) after every epoch.
    """
    rng = make_rng(seed)
    n_feat = tasks[0].train.x.shape[1]
    w = np.zeros(n_feat)
    b = float(np.mean(np.concatenate([t.train.y for t in tasks])))
    out = []
    for _ in range(epochs):
        for i in rng.permutation(len(tasks)):
            train = tasks[int(i)].train
            wi, bi = w.copy(), b
            for _ in range(spans):
                s = span_start(rng, len(train), batch)
                x, y = train.x[s:s + batch], train.y[s:s + batch]
                r = x @ wi + bi - y
                g = 2.0 * r / r.size
                wi, bi = wi - lr * (g @ x), bi - lr * g.sum()
            w, b = w + gamma * (wi - w), b + gamma * (bi - b)
        out.append(np.concatenate([w, [b]]))
    return out


def plain_composite_reference(task, *, lr, beta, batch, spans, epochs, seed, latent_dim, hidden):
    """Plain mini-batch SGD on encoder -> latent -> decoder -> linear predictor
    for a single stock. The latent is a running interpolation (rate ``beta``)
    toward the encoding of the whole train split; the encoder gradient flows
    through that interpolation. Returns the generated (w, b) after every epoch.
    """
    rng = make_rng(seed)
    train = task.train
    n_feat = train.x.shape[1]
    enc_spec = MlpSpec((n_feat, hidden, hidden, latent_dim))
    dec_spec = MlpSpec((latent_dim, hidden, hidden, n_feat + 1))
    phi_e = mlp_init(enc_spec, rng)
    phi_d = mlp_init(dec_spec, rng)
    phi_d["b3"][-1] = train.y.mean()
    z = np.zeros(latent_dim)
    out = []
    for _ in range(epochs):
        rng.permutation(1)
        for _ in range(spans):
            z0 = mlp_forward(phi_e, enc_spec, train.x).mean(axis=0)
            z = z + beta * (z0 - z)
            s = span_start(rng, len(train), batch)
            x, y = train.x[s:s + batch], train.y[s:s + batch]
            theta = mlp_forward(phi_d, dec_spec, z)
            r = x @ theta[:-1] + theta[-1] - y
            g = 2.0 * r / r.size
            g_theta = np.concatenate([g @ x, [g.sum()]])
            g_d, g_z = mlp_grad(phi_d, dec_spec, z, g_theta)
            n1 = train.x.shape[0]
            g_e, _ = mlp_grad(phi_e, enc_spec, train.x, np.tile(beta * g_z / n1, (n1, 1)))
            phi_d = phi_d.like(phi_d.values - lr * g_d.values)
            phi_e = phi_e.like(phi_e.values - lr * g_e.values)
        out.append(mlp_forward(phi_d, dec_spec, z))
    return out


def linear_theta(values):
    return linear_params(values.size - 1, values)


# ---------------------------------------------------------------- gradient suite

def tiny_model(rng, *, n_feat, latent, hidden, beta=0.3, no_encoder=False, no_latent=False, no_decoder=False,
               extractor=False):
    """Randomly initialised model with small dims (no training)."""
    from dpml.meta_engine import RunConfig, init_model
    cfg = RunConfig(latent_dim=latent, hidden=hidden, n_features=n_feat, beta=beta, no_encoder=no_encoder,
                    no_latent=no_latent, no_decoder=no_decoder, extractor="mlp" if extractor else "identity",
                    extractor_hidden=max(2, hidden // 2))
    model = init_model(cfg, rng)
    if extractor:
        model.extractor = mlp_init(cfg.extractor_spec(), rng)
    for name in model.phi_d.names():
        if name.startswith("b"):
            model.phi_d[name][...] = rng.normal(scale=0.1, size=model.phi_d[name].shape)
    return model


def gradient_cases(seed):
    """Yield ``(label, f, point, analytic)`` for one random configuration.

    Covers the MLP, the linear predictor, the latent gradient through the
    decoder, the outer decoder gradient and the first-order encoder gradient.
    """
    from dpml.meta_engine import _encode_features, decode, extract_features, latent_loss, outer_grads, \
        predictor_loss
    rng = make_rng([seed, 99])
    n_feat = int(rng.integers(2, 33))
    latent = int(rng.integers(1, 17))
    hidden = int(rng.integers(2, 33))
    n = int(rng.integers(1, 9))
    x1 = rng.normal(size=(n, n_feat))
    x2 = rng.normal(size=(n, n_feat))
    y2 = rng.normal(size=n)

    spec = MlpSpec((n_feat, hidden, hidden, latent))
    params = mlp_init(spec, rng)
    up = rng.normal(size=(n, latent))
    yield ("mlp", lambda v: float(np.sum(up * mlp_forward(params.like(v), spec, x1))), params.values,
           mlp_grad(params, spec, x1, up)[0].values)

    theta = linear_params(n_feat, rng.normal(size=n_feat + 1))
    yield ("linear", lambda v: predictor_loss(linear_params(n_feat, v), x2, y2)[0], theta.values,
           predictor_loss(theta, x2, y2)[1].values)

    model = tiny_model(rng, n_feat=n_feat, latent=latent, hidden=hidden, extractor=seed % 4 == 3)
    f1 = extract_features(model, x1)
    z = rng.normal(scale=0.5, size=latent)
    yield ("latent", lambda v: latent_loss(model, model.phi_d, v, f1, y2)[0], z,
           latent_loss(model, model.phi_d, z, f1, y2)[1])

    g = outer_grads(model, model.phi_d, z, x2, y2)
    yield ("decoder", lambda v: predictor_loss(decode(model, model.phi_d.like(v), z),
                                               extract_features(model, x2), y2)[0], model.phi_d.values,
           g.phi_di.values)

    # first order: z_i = z_prev + beta * (enc(t1) + delta - z_prev), delta held fixed
    z_prev = rng.normal(scale=0.5, size=latent)
    delta = rng.normal(scale=0.1, size=latent)
    beta = model.config.beta

    m = model.copy()

    def through_encoder(v):
        m.phi_e = model.phi_e.like(v)
        zi = z_prev + beta * (_encode_features(m, f1) + delta - z_prev)
        return predictor_loss(decode(m, m.phi_d, zi), extract_features(m, x2), y2)[0]

    zi = z_prev + beta * (_encode_features(model, f1) + delta - z_prev)
    yield ("encoder", through_encoder, model.phi_e.values,
           outer_grads(model, model.phi_d, zi, x2, y2, x1).phi_e.values)


# ---------------------------------------------------------------- acceptance bookkeeping

ACCEPTANCE: dict[int, str] = {}


def record(n: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    print(ACCEPTANCE[n])
    return ok
