import numpy as np
import pytest

from gaussianize.gaussians import GaussianSet
from gaussianize.geometry import quat_from_axis_angle
from gaussianize.inpaint3d import (InpaintConfig, InpaintError, color_diffuse, density_counts, find_unseen,
                                   gaussian_inpaint, opacity_control, size_scale, size_scale_raw)

from oracles import color_diffuse_oracle, opacity_oracle, size_scale_raw_oracle


def tilted(dot):
    return quat_from_axis_angle([1.0, 0.0, 0.0], np.arccos(dot))


def make_set(centers, dots=None, opac=None, colors=None, seen=None):
    centers = np.asarray(centers, dtype=np.float64)
    m = len(centers)
    dots = np.ones(m) if dots is None else dots
    g = GaussianSet(centers, np.array([tilted(d) for d in dots]), np.full((m, 2), 0.05),
                    np.full(m, 0.9) if opac is None else np.asarray(opac, float),
                    np.full((m, 3), 0.5) if colors is None else np.asarray(colors, float))
    if seen is not None:
        g.seen[:] = seen
    return g


def random_config(rng, m=60):
    q = rng.normal(size=(m, 4))
    # bias normals toward +z so the gate both passes and fails
    q[:, 0] += 1.5
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    g = GaussianSet(rng.uniform(-1, 1, (m, 3)), q, rng.uniform(0.01, 0.1, (m, 2)), rng.uniform(0.05, 1, m),
                    rng.uniform(0, 1, (m, 3)))
    g.seen[:] = rng.uniform(size=m) < 0.6
    g.seen[0] = True
    g.seen[1] = False
    return g


# -- find_unseen -------------------------------------------------------------------

def test_find_unseen():
    g = make_set(np.eye(3), seen=[True, True, True])
    assert len(find_unseen(g)) == 0
    g.seen[:] = False
    assert find_unseen(g).tolist() == [0, 1, 2]
    g = random_config(np.random.default_rng(0))
    assert find_unseen(g).tolist() == [i for i in range(len(g)) if not g.seen[i]]


# -- color ---------------------------------------------------------------------

def test_single_aligned_neighbor_copies_color():
    g = make_set([[0, 0, 0], [1, 0, 0]], colors=[[0.5] * 3, [0.2, 0.7, 0.1]], seen=[False, True])
    c = color_diffuse(g, [0], InpaintConfig(L=8))
    assert np.array_equal(c[0], [0.2, 0.7, 0.1])


def test_gate_fallback_to_nearest():
    g = make_set([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dots=[1.0, 0.45, 0.3],
                 colors=[[0.5] * 3, [1, 0, 0], [0, 1, 0]], seen=[False, True, True])
    c, fb = color_diffuse(g, [0], InpaintConfig(L=2), return_fallback=True)
    assert fb[0] and np.array_equal(c[0], [1.0, 0.0, 0.0])


def test_three_neighbor_hand_example():
    g = make_set([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 4]], dots=[1.0, 1.0, 0.8, 0.6],
                 opac=[0.9, 1.0, 0.5, 1.0], colors=[[0.5] * 3, [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                 seen=[False, True, True, True])
    # weights x 7: 4, 0.8, 0.6 -> shares 20/27, 4/27, 3/27
    c = color_diffuse(g, [0], InpaintConfig(L=3))
    assert np.allclose(c[0], [20 / 27, 4 / 27, 1 / 9], rtol=0, atol=1e-9)


def test_no_seen_disks():
    with pytest.raises(InpaintError, match="nothing to diffuse from"):
        color_diffuse(make_set(np.eye(3)), [0], InpaintConfig())


@pytest.mark.parametrize("seed", range(10))
def test_color_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_config(rng)
    cfg = InpaintConfig(L=int(rng.integers(1, 10)))
    un = find_unseen(g)
    assert np.abs(color_diffuse(g, un, cfg) - color_diffuse_oracle(g, un, cfg.L)).max() <= 1e-9


def test_gate_soundness_and_convexity():
    rng = np.random.default_rng(42)
    for _ in range(10):
        g = random_config(rng)
        cfg = InpaintConfig(L=6)
        un = find_unseen(g)
        base, fb = color_diffuse(g, un, cfg, return_fallback=True)
        seen = np.flatnonzero(g.seen)
        n = g.normals()
        for r, j in enumerate(un):
            d = np.linalg.norm(g.centers[seen] - g.centers[j], axis=1)
            nb = seen[np.argsort(d, kind="stable")[:6]]
            passing = nb[n[nb] @ n[j] > 0.5]
            if fb[r]:
                continue
            lo, hi = g.colors[passing].min(axis=0), g.colors[passing].max(axis=0)
            assert np.all(base[r] >= lo - 1e-9) and np.all(base[r] <= hi + 1e-9)
            gated = np.setdiff1d(nb, passing)
            if len(gated):
                h = g.copy()
                h.colors[gated] = rng.uniform(size=(len(gated), 3))
                assert np.array_equal(color_diffuse(h, [j], cfg)[0], base[r])


# -- size ------------------------------------------------------------------------

def test_size_scale_raw_examples():
    ring = [[np.cos(t), np.sin(t), 0] for t in np.linspace(0, 2 * np.pi, 4, endpoint=False)]
    g = make_set([[0, 0, 0]] + ring)
    assert abs(size_scale_raw(g, [0], InpaintConfig(L=4))[0]) < 1e-15
    g = make_set([[0, 0, 0]] + [list(np.e * np.asarray(p)) for p in ring])
    assert abs(size_scale_raw(g, [0], InpaintConfig(L=4))[0] - 1.0) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_size_scale_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    g = random_config(rng)
    un = find_unseen(g)
    L = int(rng.integers(1, 10))
    assert np.abs(size_scale_raw(g, un, InpaintConfig(L=L)) - size_scale_raw_oracle(g, un, L)).max() <= 1e-12


def test_size_scale_clamped_and_isotropic():
    g = random_config(np.random.default_rng(3))
    un = find_unseen(g)
    s = size_scale(g, un, InpaintConfig(), tau=0.05)
    assert np.all(s <= 0.05) and np.all(s >= 1e-4)
    assert np.array_equal(s[:, 0], s[:, 1])


# -- opacity ---------------------------------------------------------------------

def test_opacity_examples():
    cfg = InpaintConfig(o0=0.9, P0=2)
    g = make_set([[0, 0, 0], [5, 0, 0]])
    assert opacity_control(g, [0], cfg, rho=1.0)[0] == 0.9
    g = make_set([[0, 0, 0]] + [[0.1 * k, 0, 0] for k in range(1, 7)])
    assert abs(opacity_control(g, [0], cfg, rho=1.0)[0] - 0.3) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_opacity_matches_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    g = random_config(rng)
    un = find_unseen(g)
    cfg = InpaintConfig(o0=float(rng.uniform(0.3, 1)), P0=float(rng.integers(1, 6)))
    rho = float(rng.uniform(0.2, 0.8))
    assert np.abs(opacity_control(g, un, cfg, rho) - opacity_oracle(g, un, cfg.o0, cfg.P0, rho)).max() <= 1e-12


def test_opacity_monotone_in_density():
    rng = np.random.default_rng(4)
    g = random_config(rng)
    cfg = InpaintConfig(P0=2)
    prev = opacity_control(g, [1], cfg, 0.5)[0]
    for _ in range(10):
        extra = make_set(g.centers[1] + rng.uniform(-0.2, 0.2, (1, 3)))
        g = g.concat(extra)
        cur = opacity_control(g, [1], cfg, 0.5)[0]
        assert cur <= prev
        prev = cur
    assert density_counts(g, [1], 0.5)[0] >= 10


# -- driver --------------------------------------------------------------------

def test_gaussian_inpaint_touches_only_unseen():
    g = random_config(np.random.default_rng(5))
    before = g.copy()
    out, rep = gaussian_inpaint(g, InpaintConfig(), tau=0.1, rho=0.4)
    seen = g.seen
    for k in ("centers", "quats", "scales", "opacities", "colors"):
        assert np.array_equal(getattr(out, k)[seen], getattr(g, k)[seen]), k
    assert np.array_equal(out.centers, g.centers) and np.array_equal(out.quats, g.quats)
    assert rep.n_unseen == int((~seen).sum())
    # the input is untouched
    assert np.array_equal(g.colors, before.colors) and np.array_equal(g.scales, before.scales)


def test_gaussian_inpaint_needs_rho():
    with pytest.raises(ValueError):
        gaussian_inpaint(random_config(np.random.default_rng(6)), InpaintConfig(), tau=0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        InpaintConfig(L=0).validate()
    with pytest.raises(ValueError):
        InpaintConfig(normal_gate=0.4).validate()
    with pytest.raises(ValueError):
        InpaintConfig(o0=0).validate()
    with pytest.raises(ValueError):
        InpaintConfig(P0=0.5).validate()
