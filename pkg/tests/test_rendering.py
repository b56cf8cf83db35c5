import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthnerf.errors import LengthMismatch
from depthnerf.geometry import pixel_grid
from depthnerf.rendering import (
    RenderConfig,
    composite,
    composite_backward,
    integrate_ray,
    quantize8,
    read_pgm16,
    read_ppm,
    render_gt_depth,
    render_image,
    write_pgm16,
    write_ppm,
)
from depthnerf.sampling import SampleSet, segment_lengths, stratified
from depthnerf.scene import make_camera, parse_scene, render_exact

from conftest import make_view


def _samples(ts, t_far):
    ts = np.asarray(ts, dtype=np.float64)
    z = np.zeros(ts.size)
    return SampleSet(ts, segment_lengths(ts, t_far), np.zeros((0, ts.size)), z, z)


def _direct_composite(sigma, rgb, deltas):
    """Loop form of the discrete emission-absorption sum."""
    color = np.zeros(3)
    acc = 0.0
    for j in range(len(sigma)):
        t_j = np.exp(-sum(sigma[k] * deltas[k] for k in range(j)))
        w = t_j * (1 - np.exp(-sigma[j] * deltas[j]))
        color += w * rgb[j]
        acc += w
    return color, acc


class TestIntegrateRay:
    def test_empty(self):
        r = integrate_ray(_samples([0.1, 0.5, 0.9], 1.0), np.ones((3, 3)), np.zeros(3))
        np.testing.assert_array_equal(r.color, 0.0)
        assert r.alpha == 0.0 and np.isnan(r.expected_depth)

    def test_half_opacity(self):
        c = np.array([0.2, 0.6, 1.0])
        r = integrate_ray(_samples(np.linspace(0, np.log(2), 7, endpoint=False), np.log(2)), np.tile(c, (7, 1)), np.ones(7))
        np.testing.assert_allclose(r.color, 0.5 * c, rtol=1e-14)

    def test_opaque_front(self):
        rgb = np.array([[0.3, 0.4, 0.5], [1.0, 0.0, 0.0]])
        r = integrate_ray(_samples([1.0, 1.1], 2.0), rgb, np.array([200.0, 5.0]))  # sigma*delta = 20
        np.testing.assert_allclose(r.color, rgb[0], atol=1e-8)
        np.testing.assert_allclose(r.expected_depth, 1.0, atol=1e-8)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            integrate_ray(_samples([0.1, 0.2], 1.0), np.ones((3, 3)), np.ones(3))

    def test_matches_loop_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 20))
            sigma = rng.exponential(2.0, n)
            rgb = rng.random((n, 3))
            ts = np.sort(rng.uniform(0, 1, n))
            r = integrate_ray(_samples(ts, 1.5), rgb, sigma)
            color, acc = _direct_composite(sigma, rgb, segment_lengths(ts, 1.5))
            np.testing.assert_allclose(r.color, color, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(r.alpha, acc, rtol=1e-12, atol=1e-15)


class TestCompositeProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.floats(0.01, 20), st.integers(0, 2**31))
    def test_telescoping_partition_independent(self, n, sigma, seed):
        ts = np.sort(np.random.default_rng(seed).uniform(0.0, 1.0, n))
        ts[0] = 0.0
        c = np.array([0.9, 0.5, 0.1])
        color, alpha, _, _, _ = composite(np.full(n, sigma), np.tile(c, (n, 1)), segment_lengths(ts, 1.0))
        np.testing.assert_allclose(alpha, -np.expm1(-sigma), rtol=1e-12)
        np.testing.assert_allclose(color, c * -np.expm1(-sigma), rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**31))
    def test_bounds_and_energy(self, n, seed):
        rng = np.random.default_rng(seed)
        sigma = rng.exponential(5.0, n) * (rng.random(n) < 0.7)
        rgb = rng.random((n, 3))
        deltas = rng.uniform(0.01, 0.5, n)
        color, alpha, _, w, _ = composite(sigma, rgb, deltas)
        assert 0.0 <= alpha <= 1.0
        np.testing.assert_allclose(np.sum(w), alpha, rtol=1e-15)
        np.testing.assert_allclose(alpha, 1 - np.exp(-np.sum(sigma * deltas)), rtol=1e-12, atol=1e-15)
        assert np.max(color) <= np.max(rgb) + 1e-15
        j = int(rng.integers(n))
        bumped = sigma.copy()
        bumped[j] += rng.exponential(1.0)
        assert composite(bumped, rgb, deltas)[1] >= alpha

    def test_clamp_keeps_gradients_finite(self):
        sigma = np.array([1e30, 1.0])
        color, alpha, _, _, cache = composite(sigma, np.ones((2, 3)), np.array([1.0, 1.0]))
        dsig, drgb = composite_backward(np.ones(3), cache, dalpha=np.array(0.5))
        assert np.all(np.isfinite(dsig)) and np.all(np.isfinite(drgb))
        assert alpha == 1.0

    def test_backward_finite_differences(self, rng):
        m, n = 3, 8
        sigma = rng.exponential(2.0, (m, n))
        rgb = rng.random((m, n, 3))
        deltas = rng.uniform(0.05, 0.3, (m, n))
        gc = rng.normal(size=(m, 3))
        ga = rng.normal(size=m)

        def f(s, c):
            color, alpha, _, _, _ = composite(s, c, deltas)
            return float(np.sum(color * gc) + np.sum(alpha * ga))

        _, _, _, _, cache = composite(sigma, rgb, deltas)
        dsig, drgb = composite_backward(gc, cache, dalpha=ga)
        h = 1e-6
        for idx in np.ndindex(m, n):
            e = np.zeros_like(sigma)
            e[idx] = h
            fd = (f(sigma + e, rgb) - f(sigma - e, rgb)) / (2 * h)
            assert abs(fd - dsig[idx]) <= 1e-6 * abs(fd) + 1e-9
        for idx in [(0, 0, 0), (1, 4, 2), (2, 7, 1)]:
            e = np.zeros_like(rgb)
            e[idx] = h
            fd = (f(sigma, rgb + e) - f(sigma, rgb - e)) / (2 * h)
            assert abs(fd - drgb[idx]) <= 1e-6 * abs(fd) + 1e-9

    def test_linear_density_converges_first_order(self):
        # sigma(t) = a + b t on [0, L], constant color: exact alpha = 1 - exp(-(aL + bL^2/2))
        a, b, L = 0.5, 3.0, 1.0
        exact = -np.expm1(-(a * L + 0.5 * b * L * L))
        ns = np.array([8, 16, 32, 64, 128, 256, 512])
        errs = []
        for n in ns:
            ts = stratified(0.0, L, n)  # midpoints
            ts = ts - 0.5 * L / n  # left endpoints: first-order rule
            _, alpha, _, _, _ = composite(a + b * ts, np.ones((n, 3)), segment_lengths(ts, L))
            errs.append(abs(alpha - exact))
        slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
        assert -1.2 <= slope <= -0.8


SPHERE = """
sphere 0 0 0 1 0.9 0.3 0.1
camera ring 4 4 90 20 40
camera target 0 0
render 64 64 auto auto 0.1 0.2 0.3
"""


@pytest.fixture(scope="module")
def sphere_scene():
    return parse_scene(SPHERE)


def _dense_sampler(n):
    def sampler(o, d, near, far, rng):
        return stratified(near, far, n, rng)

    return sampler


class TestRenderImage:
    def test_empty_scene_background(self):
        scene = parse_scene("render 8 6 1 5 0.25 0.5 0.75\ncamera target 0 0\n")
        view = make_view(width=8, height=6)
        out = render_image(view, 1.0, 5.0, lambda x, d: scene.radiance(x), _dense_sampler(16), cfg=RenderConfig(background=(0.25, 0.5, 0.75)))
        np.testing.assert_array_equal(out.image, np.broadcast_to([0.25, 0.5, 0.75], (6, 8, 3)))
        assert np.all(out.alpha == 0.0)

    def test_matches_supersampled_reference(self, sphere_scene):
        view = make_camera(sphere_scene, 0.0, 0.0)
        near, far = sphere_scene.near_far(view)
        out = render_image(
            view, near, far, lambda x, d: sphere_scene.radiance(x), _dense_sampler(256),
            cfg=RenderConfig(background=tuple(sphere_scene.background)),
        )
        sub = (np.arange(4) + 0.5) / 4 - 0.5
        grid = pixel_grid(64, 64)
        acc = np.zeros((64, 64, 3))
        for dv in sub:
            for du in sub:
                acc += render_exact(view, sphere_scene, grid + np.array([du, dv]))[0]
        ref = acc / 16
        assert np.mean(np.abs(out.image - ref)) < 0.02

    def test_deterministic(self, sphere_scene):
        view = make_camera(sphere_scene, 30.0, 10.0, 16, 16)
        near, far = sphere_scene.near_far(view)
        run = lambda threads: render_image(
            view, near, far, lambda x, d: sphere_scene.radiance(x), _dense_sampler(32), seed=4,
            cfg=RenderConfig(chunk=50, threads=threads),
        )
        a, b = run(1), run(1)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(run(3).image, a.image)


class TestGroundTruthDepth:
    def test_plane(self):
        scene = parse_scene("plane 0 0 2 0 0 -1\nrender 8 6 auto auto 0 0 0\n")
        depth, std = render_gt_depth(make_view(eye=(0, 0, 0), target=(0, 0, 1), width=8, height=6), scene)
        np.testing.assert_allclose(depth, 2.0, rtol=1e-12)
        assert np.all(std > 0)

    def test_sphere_center_pixel(self):
        scene = parse_scene("sphere 0 0 4 1\nrender 9 9 auto auto 0 0 0\n")
        view = make_view(eye=(0, 0, 0), target=(0, 0, 1), width=9, height=9)
        depth, _ = render_gt_depth(view, scene)
        np.testing.assert_allclose(depth[4, 4], 3.0, rtol=1e-14)

    def test_sphere_quadratic_oracle(self, rng):
        scene = parse_scene("sphere 0.1 -0.2 4 1\nrender 32 24 auto auto 0 0 0\n")
        view = make_view(eye=(0, 0, 0), target=(0, 0, 1), focal=20.0)
        depth, _ = render_gt_depth(view, scene)
        c = np.array([0.1, -0.2, 4.0])
        edge = 0
        for v in range(24):
            for u in range(32):
                d = np.linalg.solve(view.K, [u, v, 1.0])
                d /= np.linalg.norm(d)
                bq = d @ c
                disc = bq * bq - (c @ c - 1.0)
                if disc < 0:
                    assert depth[v, u] == 0.0
                    continue
                t = bq - np.sqrt(disc)
                assert abs(depth[v, u] - t * d[2]) < 1e-9
                edge += disc < 0.1
        assert edge > 0

    def test_noise_perturbs_valid_only(self, rng):
        scene = parse_scene("sphere 0 0 4 1\nrender 16 16 auto auto 0 0 0\n")
        view = make_view(eye=(0, 0, 0), target=(0, 0, 1), width=16, height=16, focal=10.0)
        clean, _ = render_gt_depth(view, scene)
        noisy, std = render_gt_depth(view, scene, 0.01, rng)
        assert np.all((noisy == 0) == (clean == 0))
        np.testing.assert_allclose(std, 0.01)
        resid = (noisy - clean)[clean > 0]
        assert 0.005 < np.std(resid) < 0.02


class TestImageFiles:
    def test_quantize_round_half_up(self):
        np.testing.assert_array_equal(quantize8([0.0, 0.5 / 255, 1.5 / 255, 1.0, 2.0, -1.0]), [0, 1, 2, 255, 255, 0])

    def test_ppm_round_trip(self, tmp_path, rng):
        img = rng.random((5, 7, 3))
        write_ppm(tmp_path / "a.ppm", img)
        raw = (tmp_path / "a.ppm").read_bytes()
        assert raw.startswith(b"P6\n7 5\n255\n")
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), quantize8(img) / 255.0)

    def test_pgm_round_trip(self, tmp_path, rng):
        vals = rng.uniform(1.0, 3.0, (4, 6))
        vals[0, 0] = np.nan
        write_pgm16(tmp_path / "d.pgm", vals, 1.0, 3.0)
        codes = read_pgm16(tmp_path / "d.pgm")
        assert codes[0, 0] == 0
        back = 1.0 + codes / 65535 * 2.0
        np.testing.assert_allclose(back[1:], vals[1:], atol=2.0 / 65535)
        assert "linear" in (tmp_path / "d.pgm.txt").read_text()

    def test_files_deterministic(self, tmp_path, rng):
        img = rng.random((3, 3, 3))
        write_ppm(tmp_path / "a.ppm", img)
        write_ppm(tmp_path / "b.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
