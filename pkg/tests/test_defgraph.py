import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndgraph import defgraph as dg
from ndgraph import diffcore as dc
from ndgraph import gradcheck as gc
from ndgraph import sdfgrid as sg


def make_frame(rng, n=5, spread=0.3):
    positions = 0.5 + spread * rng.uniform(-1, 1, (n, 3))
    rotations = rng.uniform(-0.5, 0.5, (n, 3))
    weights = rng.uniform(0.5, 2.0, n)
    return dg.GraphFrame(positions, rotations, weights)


def influence_oracle(points, positions, radii, weights):
    """Scalar re-implementation: w_i * exp(-|x - v_i|^2 / r_i^2)."""
    m, n = len(points), len(positions)
    out = np.zeros((m, n))
    for a in range(m):
        for i in range(n):
            d2 = float(np.sum((points[a] - positions[i]) ** 2))
            out[a, i] = weights[i] * np.exp(-d2 / radii[i] ** 2)
    return out


class TestGraphFrame:
    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(dg.GraphError):
            dg.GraphFrame(rng.uniform(size=(4, 3)), rng.uniform(size=(3, 3)),
                          rng.uniform(size=4))
        with pytest.raises(dg.GraphError):
            dg.GraphFrame(rng.uniform(size=(4, 3)), rng.uniform(size=(4, 3)),
                          rng.uniform(size=5))

    def test_negative_weight_rejected_zero_allowed(self, rng):
        pos = rng.uniform(size=(3, 3))
        rot = rng.uniform(size=(3, 3))
        with pytest.raises(dg.GraphError):
            dg.GraphFrame(pos, rot, np.array([0.5, -1e-9, 0.5]))
        frame = dg.GraphFrame(pos, rot, np.array([0.5, 0.0, 0.5]))
        assert frame.n_nodes == 3

    def test_non_finite_rejected(self, rng):
        pos = rng.uniform(size=(3, 3))
        pos[1, 2] = np.nan
        with pytest.raises(dg.GraphError):
            dg.GraphFrame(pos, np.zeros((3, 3)), np.ones(3))


class TestInfluence:
    def test_matches_scalar_oracle(self, rng):
        pts = rng.uniform(0, 1, (40, 3))
        pos = rng.uniform(0, 1, (7, 3))
        radii = rng.uniform(0.1, 0.5, 7)
        w = rng.uniform(0.2, 3.0, 7)
        got = dg.influence(dc.constant(pts), dc.constant(pos),
                           dc.constant(radii), dc.constant(w))
        np.testing.assert_allclose(got.data, influence_oracle(pts, pos, radii, w),
                                   rtol=0, atol=1e-10)

    def test_value_at_node_center_is_weight(self, rng):
        pos = rng.uniform(0, 1, (4, 3))
        w = rng.uniform(0.5, 2.0, 4)
        got = dg.influence(dc.constant(pos), dc.constant(pos),
                           dc.constant(np.full(4, 0.3)), dc.constant(w))
        np.testing.assert_allclose(np.diag(got.data), w, rtol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        arrays = {
            "points": rng.uniform(0.2, 0.8, (6, 3)),
            "positions": rng.uniform(0.2, 0.8, (3, 3)),
            "radii": rng.uniform(0.2, 0.5, 3),
            "weights": rng.uniform(0.5, 2.0, 3),
        }

        def build(t):
            return dc.reduce_sum(dg.influence(t["points"], t["positions"],
                                              t["radii"], t["weights"]))

        assert gc.check_gradient(build, arrays) < 1e-6


class TestCoverage:
    def test_far_point_uncovered_node_point_covered(self, rng):
        frame = dg.GraphFrame(np.full((1, 3), 0.5), np.zeros((1, 3)), [2.0])
        radii = dc.constant([0.1])
        pts = dc.constant(np.array([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]))
        c = dg.coverage(pts, frame, radii).data
        assert c[0] > 0.99
        assert c[1] < 0.01

    def test_loss_matches_scalar_oracle(self, rng):
        frame = make_frame(rng, n=4)
        radii = rng.uniform(0.1, 0.4, 4)
        params = dg.CoverageParams()

        class Samples:
            p_uniform = rng.uniform(0, 1, (15, 3))
            p_near = rng.uniform(0, 1, (11, 3))
            c_uniform = (rng.uniform(size=15) < 0.5).astype(float)
            c_near = (rng.uniform(size=11) < 0.5).astype(float)
            sdf_uniform = rng.normal(size=15) * 0.1
            sdf_near = rng.normal(size=11) * 0.02

        got = dg.loss_coverage(Samples, frame, dc.constant(radii), params,
                               lam_uniform=1.0, lam_near=0.1)

        def term(pts, labels, sdf):
            g = influence_oracle(pts, frame.positions.data, radii,
                                 frame.weights.data)
            pred = 1.0 / (1.0 + np.exp(-(g.sum(axis=1) - params.offset)
                                       * params.sharpness))
            w = np.where(sdf < 0, dg.INTERIOR_SAMPLE_WEIGHT, 1.0)
            return float(np.sum(w * (pred - labels) ** 2))

        want = (term(Samples.p_uniform, Samples.c_uniform, Samples.sdf_uniform)
                + 0.1 * term(Samples.p_near, Samples.c_near, Samples.sdf_near))
        assert float(got.data) == pytest.approx(want, rel=1e-10)

    def test_interior_samples_weighted_up(self, rng):
        frame = make_frame(rng, n=3)
        radii = dc.constant(rng.uniform(0.1, 0.4, 3))

        class Base:
            p_uniform = rng.uniform(0, 1, (8, 3))
            p_near = np.zeros((0, 3))
            c_uniform = np.ones(8)
            c_near = np.zeros(0)
            sdf_uniform = np.full(8, 0.1)
            sdf_near = np.zeros(0)

        class Flipped(Base):
            sdf_uniform = np.full(8, -0.1)

        lo = float(dg.loss_coverage(Base, frame, radii).data)
        hi = float(dg.loss_coverage(Flipped, frame, radii).data)
        assert hi == pytest.approx(dg.INTERIOR_SAMPLE_WEIGHT * lo, rel=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        radii = rng.uniform(0.2, 0.4, 3)

        class Samples:
            p_uniform = rng.uniform(0.2, 0.8, (9, 3))
            p_near = rng.uniform(0.2, 0.8, (5, 3))
            c_uniform = (rng.uniform(size=9) < 0.5).astype(float)
            c_near = (rng.uniform(size=5) < 0.5).astype(float)
            sdf_uniform = rng.normal(size=9) * 0.1
            sdf_near = rng.normal(size=5) * 0.02

        arrays = {
            "positions": rng.uniform(0.3, 0.7, (3, 3)),
            "weights": rng.uniform(0.5, 2.0, 3),
            "radii": radii,
        }

        def build(t):
            frame = dg.GraphFrame(t["positions"], np.zeros((3, 3)), t["weights"])
            return dg.loss_coverage(Samples, frame, t["radii"])

        assert gc.check_gradient(build, arrays) < 1e-3


class TestInterior:
    def test_negative_samples_cost_nothing(self, rng):
        vol = sg.from_function(lambda p: np.full(len(p), -0.05), 8, 0.1)
        frame = dg.GraphFrame(rng.uniform(0.2, 0.8, (5, 3)),
                              np.zeros((5, 3)), np.ones(5))
        assert float(dg.loss_interior(frame, vol).data) == 0.0

    def test_positive_samples_sum_their_values(self, rng):
        vol = sg.from_function(lambda p: np.full(len(p), 0.03), 8, 0.1)
        frame = dg.GraphFrame(rng.uniform(0.2, 0.8, (6, 3)),
                              np.zeros((6, 3)), np.ones(6))
        assert float(dg.loss_interior(frame, vol).data) == pytest.approx(
            6 * 0.03, rel=1e-6)

    def test_escaped_node_pays_distance_to_nearest_corner(self):
        vol = sg.unit_cube_volume(8, 0.1, fill=-0.1)
        outside = np.array([[1.4, 1.3, -0.2]])
        frame = dg.GraphFrame(outside, np.zeros((1, 3)), np.ones(1))
        want = float(np.sum((outside[0] - np.array([1.0, 1.0, 0.0])) ** 2))
        assert float(dg.loss_interior(frame, vol).data) == pytest.approx(
            want, rel=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        vals = rng.normal(size=(6, 6, 6)) * 0.05 + 0.08  # strictly positive
        vol = sg.SdfVolume(vals, np.zeros(3), 1.0 / 5, 0.1)
        cells = rng.integers(0, 5, size=(4, 3))
        frac = rng.uniform(0.2, 0.8, (4, 3))
        arrays = {"positions": (cells + frac) / 5.0}

        def build(t):
            frame = dg.GraphFrame(t["positions"], np.zeros((4, 3)), np.ones(4))
            return dg.loss_interior(frame, vol)

        assert gc.check_gradient(build, arrays) < 1e-6


def affinity_oracle(aff, distances, positions, lam_rel, lam_abs):
    n = len(positions)
    rel = abs_term = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d2 = float(np.sum((positions[i] - positions[j]) ** 2))
            rel += aff[i, j] * abs(distances[i, j] ** 2 - d2)
            abs_term += aff[i, j] * d2
    return lam_rel * rel + lam_abs * abs_term


def sparsity_oracle(mats):
    def softmax(m):
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    sms = [softmax(m) for m in mats]
    total = 0.0
    for l in range(len(sms)):
        for m in range(len(sms)):
            if l != m:
                total += float(np.sum((sms[l] * sms[m]) ** 2))
    return total


class TestAffinity:
    def test_matches_scalar_oracle(self, rng):
        n = 6
        glob = dg.init_graph_globals(n, k_neighbors=3, seed=1)
        frame = make_frame(rng, n=n)
        got = dg.loss_affinity(glob.affinity(), glob.node_distances, frame,
                               lam_rel=0.3, lam_abs=0.7)
        aff = np.mean([sparsity_softmax(a.data) for a in glob.affinity_params],
                      axis=0)
        want = affinity_oracle(aff, glob.node_distances.data,
                               frame.positions.data, 0.3, 0.7)
        assert float(got.data) == pytest.approx(want, abs=1e-10)

    def test_rows_of_affinity_sum_to_one(self):
        glob = dg.init_graph_globals(9, k_neighbors=2, seed=3)
        rows = glob.affinity().data.sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-6)

    def test_gradient_matches_finite_differences(self, rng):
        n = 4
        base_pos = rng.uniform(0, 1, (n, 3))
        # keep |D^2 - dist^2| away from the abs kink
        base_d = np.sqrt(((base_pos[:, None] - base_pos[None]) ** 2).sum(-1)
                         + 0.3)
        arrays = {
            "positions": base_pos,
            "distances": base_d,
            "aff0": rng.normal(size=(n, n)),
            "aff1": rng.normal(size=(n, n)),
        }

        def build(t):
            frame = dg.GraphFrame(t["positions"], np.zeros((n, 3)), np.ones(n))
            aff = dc.mul(dc.add(dc.softmax_rows(t["aff0"]),
                                dc.softmax_rows(t["aff1"])), dc.constant(0.5))
            return dg.loss_affinity(aff, t["distances"], frame,
                                    lam_rel=0.1, lam_abs=0.1)

        assert gc.check_gradient(build, arrays) < 1e-5


def sparsity_softmax(m):
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestSparsity:
    def test_matches_scalar_oracle(self, rng):
        mats = [rng.normal(size=(5, 5)) for _ in range(3)]
        got = dg.loss_sparsity([dc.constant(m) for m in mats])
        assert float(got.data) == pytest.approx(sparsity_oracle(mats), abs=1e-10)

    def test_single_matrix_has_no_overlap(self, rng):
        got = dg.loss_sparsity([dc.constant(rng.normal(size=(4, 4)))])
        assert float(got.data) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_invariant_under_node_permutation(self, seed):
        r = np.random.default_rng(seed)
        mats = [r.normal(size=(5, 5)) for _ in range(2)]
        perm = r.permutation(5)
        permuted = [m[perm][:, perm] for m in mats]
        a = float(dg.loss_sparsity([dc.constant(m) for m in mats]).data)
        b = float(dg.loss_sparsity([dc.constant(m) for m in permuted]).data)
        assert a == pytest.approx(b, rel=1e-12)

    def test_disjoint_choices_score_lower(self):
        sharp = 40.0
        a = np.eye(4) * sharp
        overlapping = [dc.constant(a), dc.constant(a.copy())]
        disjoint = [dc.constant(a), dc.constant(np.roll(a, 1, axis=1))]
        assert (float(dg.loss_sparsity(disjoint).data)
                < float(dg.loss_sparsity(overlapping).data))

    def test_gradient_matches_finite_differences(self, rng):
        arrays = {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=(4, 4))}

        def build(t):
            return dg.loss_sparsity([t["a"], t["b"]])

        assert gc.check_gradient(build, arrays) < 1e-6


class TestGlobals:
    def test_init_is_deterministic(self):
        a = dg.init_graph_globals(8, k_neighbors=2, seed=5)
        b = dg.init_graph_globals(8, k_neighbors=2, seed=5)
        for ta, tb in zip(a.parameters().values(), b.parameters().values()):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_radii_exponentiate_log_state(self):
        glob = dg.init_graph_globals(6, radius=0.25)
        np.testing.assert_allclose(glob.radii().data, 0.25, rtol=1e-12)

    def test_parameter_names_unique(self):
        glob = dg.init_graph_globals(6, k_neighbors=3)
        names = list(glob.parameters())
        assert len(names) == len(set(names)) == 5

    def test_hard_neighbors_are_argmax_rows(self, rng):
        glob = dg.init_graph_globals(7, k_neighbors=2, seed=9)
        got = dg.hard_neighbors(glob)
        for k, a in enumerate(glob.affinity_params):
            np.testing.assert_array_equal(got[k], np.argmax(a.data, axis=1))
