import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpzrepair.cpz import (
    Cpz,
    DimensionInfo,
    boundary_depth,
    compact,
    constraint_residual,
    contains,
    contains_info,
    distance_batch,
    distance_to_set,
    embed,
    evaluate_point,
    from_text,
    intersect,
    is_empty,
    is_feasible_assignment,
    membership_batch,
    project,
    sample_point,
    to_text,
    unify,
    union,
)
from cpzrepair.nlp import NlpOptions, default_starts

from _oracles import ball_cpz, composite_agreement, example1_cpz, grid_min_residual, random_cpz

DESK_BOUNDS = {"u": (-4.0, 4.0), "v": (-4.0, 4.0), "w": (-4.0, 4.0)}


# ---------------------------------------------------------------------------
# construction and plain evaluation


class TestConstruction:
    def test_shapes_recorded(self):
        S = example1_cpz()
        assert (S.n, S.ell, S.p, S.m, S.q) == (2, 3, 2, 3, 3)
        assert S.dims == ("d1", "d2")

    def test_arrays_frozen(self):
        S = example1_cpz()
        with pytest.raises(ValueError):
            S.G[0, 0] = 9.0

    def test_generator_row_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Cpz(c=[0.0], G=[[1.0], [1.0]], E=[[1]], A=[], b=[], R=[[]], dims=("x",))

    def test_negative_exponents_rejected(self):
        with pytest.raises(ValueError):
            Cpz(c=[0.0], G=[[1.0]], E=[[-1]], A=[], b=[], R=np.zeros((1, 0), int), dims=("x",))

    def test_duplicate_dims_rejected(self):
        with pytest.raises(ValueError):
            Cpz(c=[0.0, 0.0], G=np.zeros((2, 1)), E=[[0]], A=[], b=[],
                R=np.zeros((1, 0), int), dims=("x", "x"))

    def test_constraint_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Cpz(c=[0.0], G=[[1.0]], E=[[1]], A=[[1.0, 2.0]], b=[0.0],
                R=[[1]], dims=("x",))

    def test_dimension_info_validates(self):
        with pytest.raises(ValueError):
            DimensionInfo("bad id", 0.0, 1.0)
        with pytest.raises(ValueError):
            DimensionInfo("x", 1.0, 1.0)
        d = DimensionInfo("x", -2.0, 4.0)
        assert d.extent == 6.0 and d.midpoint == 1.0

    def test_caller_array_not_frozen(self):
        G = np.array([[1.0]])
        Cpz(c=[0.0], G=G, E=[[1]], A=[], b=[], R=np.zeros((1, 0), int), dims=("x",))
        G[0, 0] = 5.0  # caller copy must stay writable


class TestEvaluation:
    def test_example1_known_point(self):
        S = example1_cpz()
        assert np.allclose(evaluate_point(S, [1.0, 1.0]), [6.0, 3.0])

    def test_example1_hand_point(self):
        # monomials at a=(0.5,-1): E cols -> 0.5, 1, -0.5; R cols -> 0.5, -1, 0.25
        S = example1_cpz()
        assert np.allclose(evaluate_point(S, [0.5, -1.0]), [2.0, -1.5])
        assert constraint_residual(S, [0.5, -1.0]) == pytest.approx(0.75)

    def test_example1_residual_at_ones(self):
        assert constraint_residual(example1_cpz(), [1.0, 1.0]) == pytest.approx(5.0)

    def test_zero_exponent_column_is_constant_offset(self):
        S = Cpz(c=[1.0], G=[[2.0]], E=[[0]], A=[], b=[], R=np.zeros((1, 0), int),
                dims=("x",))
        for a in (-1.0, 0.0, 0.7):
            assert evaluate_point(S, [a])[0] == pytest.approx(3.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_loop_arithmetic(self, seed):
        rng = np.random.default_rng(seed)
        S = random_cpz(rng, ("u", "v"))
        a = rng.uniform(-1.0, 1.0, S.p)
        x = np.array(S.c, dtype=float)
        for j in range(S.ell):
            term = 1.0
            for k in range(S.p):
                term *= a[k] ** S.E[k, j]
            x = x + S.G[:, j] * term
        assert np.allclose(evaluate_point(S, a), x, atol=1e-12)

    def test_feasible_assignment_flag(self):
        S = example1_cpz()
        assert not is_feasible_assignment(S, [1.0, 1.0])
        B = ball_cpz([0.0, 0.0, 0.0], 0.1)
        assert is_feasible_assignment(B, [1.0, 0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# membership, distance, depth against the closed-form ball


class TestBallClosedForms:
    B = ball_cpz([0.0, 0.0, 0.0], 0.1)

    def test_membership_matches_norm(self):
        pts = np.random.default_rng(0).uniform(-0.15, 0.15, (1500, 3))
        inside, _ = membership_batch(self.B, pts)
        r = np.linalg.norm(pts, axis=1)
        off_band = np.abs(r - 0.1) > 1e-6
        assert np.array_equal(inside[off_band], (r <= 0.1)[off_band])

    def test_boundary_point_inside(self):
        assert contains(self.B, [0.1, 0.0, 0.0])
        assert distance_to_set(self.B, [0.1, 0.0, 0.0]) <= 1e-6

    def test_exterior_distance_example(self):
        want = (np.sqrt(0.08) - 0.1) ** 2
        assert distance_to_set(self.B, [0.2, 0.2, 0.0]) == pytest.approx(want, abs=1e-4)

    def test_exterior_distance_sample(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            p = rng.uniform(-0.3, 0.3, 3)
            r = np.linalg.norm(p)
            if r <= 0.12:
                continue
            got = distance_to_set(self.B, p)
            assert got == pytest.approx((r - 0.1) ** 2, rel=1e-4)

    def test_interior_distance_zero(self):
        for p in np.random.default_rng(5).uniform(-0.05, 0.05, (20, 3)):
            assert distance_to_set(self.B, p) <= 1e-12

    def test_distance_batch_matches(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.3, 0.3, (120, 3))
        pts = pts[np.linalg.norm(pts, axis=1) > 0.12][:60]
        d2, ok = distance_batch(self.B, pts)
        want = (np.linalg.norm(pts, axis=1) - 0.1) ** 2
        assert ok.all()
        assert np.all(np.abs(d2 - want) <= 1e-3 * want + 2e-6)

    def test_depth_at_center(self):
        depth = boundary_depth(self.B, [0.0, 0.0, 0.0])
        assert 0.0 < depth <= 0.01 + 1e-9

    def test_depth_near_boundary(self):
        depth = boundary_depth(self.B, [0.09, 0.0, 0.0])
        assert depth == pytest.approx(1e-4, abs=1e-5)

    def test_depth_degenerate_point_set(self):
        P = Cpz(c=[0.3, 0.1], G=np.zeros((2, 0)), E=np.zeros((0, 0), int),
                A=[], b=[], R=np.zeros((0, 0), int), dims=("u", "v"))
        assert boundary_depth(P, [0.3, 0.1]) == 0.0

    def test_distance_consistency_with_membership(self):
        rng = np.random.default_rng(17)
        for p in rng.uniform(-0.15, 0.15, (25, 3)):
            r = np.linalg.norm(p)
            if abs(r - 0.1) <= 1e-5:
                continue
            inside = contains(self.B, p)
            d2 = distance_to_set(self.B, p)  # squared, so the cut is tol^2
            assert inside == (d2 <= 1e-12)


# ---------------------------------------------------------------------------
# emptiness


class TestEmptiness:
    def test_example1_empty_and_grid_oracle(self):
        S = example1_cpz()
        assert is_empty(S)
        val = grid_min_residual(S, steps=51)  # coarse for speed; full in acceptance
        assert val > 0.01

    def test_unconstrained_not_empty(self):
        S = Cpz(c=[0.0], G=[[1.0]], E=[[1]], A=[], b=[], R=np.zeros((1, 0), int),
                dims=("x",))
        assert not is_empty(S)

    def test_disjoint_ball_intersection_empty(self):
        B1 = ball_cpz([0.0, 0.0, 0.0], 0.1)
        B2 = ball_cpz([1.0, 0.0, 0.0], 0.1)
        assert is_empty(intersect(B1, B2))

    def test_overlapping_ball_intersection_not_empty(self):
        B1 = ball_cpz([0.0, 0.0, 0.0], 0.1)
        B2 = ball_cpz([0.05, 0.0, 0.0], 0.1)
        assert not is_empty(intersect(B1, B2))


# ---------------------------------------------------------------------------
# set constructions vs membership oracles


class TestCompositions:
    def test_intersection_oracle(self):
        rng = np.random.default_rng(100)
        for _ in range(6):
            S1 = random_cpz(rng, ("u", "v"))
            S2 = random_cpz(rng, ("u", "v"))
            pts = rng.uniform(-3.0, 3.0, (250, 2))
            hard, _ = composite_agreement(S1, S2, intersect(S1, S2), pts, "and")
            assert hard == 0

    def test_union_oracle(self):
        rng = np.random.default_rng(200)
        for _ in range(6):
            S1 = random_cpz(rng, ("u", "v"))
            S2 = random_cpz(rng, ("u", "v"))
            pts = rng.uniform(-3.0, 3.0, (250, 2))
            hard, _ = composite_agreement(S1, S2, union(S1, S2), pts, "or")
            assert hard == 0

    def test_union_contains_operand_samples(self):
        rng = np.random.default_rng(7)
        B1 = ball_cpz([0.0, 0.0, 0.0], 0.1)
        B2 = ball_cpz([0.5, 0.0, 0.0], 0.2)
        U = union(B1, B2)
        for S, lam in ((B1, 1.0), (B2, -1.0)):
            for _ in range(10):
                x = sample_point(S, rng)
                assert x is not None
                assert contains(U, x)

    def test_intersect_requires_same_dims(self):
        S1 = random_cpz(np.random.default_rng(1), ("u", "v"))
        S2 = random_cpz(np.random.default_rng(2), ("u", "w"))
        with pytest.raises(ValueError):
            intersect(S1, S2)


class TestUnifyProjectEmbed:
    def test_project_rows(self):
        S = example1_cpz()
        P = project(S, ("d2",))
        assert P.dims == ("d2",)
        a = [0.3, -0.4]
        assert evaluate_point(P, a)[0] == pytest.approx(evaluate_point(S, a)[1])

    def test_embed_then_project_is_identity_on_own_dims(self):
        rng = np.random.default_rng(31)
        for _ in range(5):
            S = random_cpz(rng, ("u", "v"))
            Se = embed(S, ("u", "w", "v"), DESK_BOUNDS)
            back = project(Se, ("u", "v"))
            # original factors keep their positions; new ones are appended
            for _ in range(6):
                a = rng.uniform(-1.0, 1.0, S.p)
                ae = np.concatenate([a, rng.uniform(-1.0, 1.0, Se.p - S.p)])
                assert np.allclose(evaluate_point(back, ae), evaluate_point(S, a))
                assert constraint_residual(Se, ae) == pytest.approx(
                    constraint_residual(S, a), abs=1e-12
                )

    def test_unify_dim_order(self):
        S1 = random_cpz(np.random.default_rng(41), ("a", "b"))
        S2 = random_cpz(np.random.default_rng(42), ("b", "c"))
        bounds = {k: (-4.0, 4.0) for k in ("a", "b", "c")}
        U1, U2 = unify(S1, S2, bounds)
        assert U1.dims == U2.dims == ("a", "b", "c")

    def test_unify_membership_round_trip(self):
        rng = np.random.default_rng(55)
        bounds = {k: (-4.0, 4.0) for k in ("a", "b", "c")}
        S1 = random_cpz(rng, ("a", "b"))
        S2 = random_cpz(rng, ("b", "c"))
        U1, _ = unify(S1, S2, bounds)
        pts = rng.uniform(-3.0, 3.0, (150, 2))
        in_orig, _, W = membership_batch(S1, pts, want_witness=True)
        # witness transfer: original factors keep their slots, new ones free
        seeds = np.zeros((len(pts), 1, U1.p))
        seeds[in_orig, 0, : S1.p] = W[in_orig]
        proj = project(U1, ("a", "b"))
        in_proj, _ = membership_batch(proj, pts, seeds=seeds)
        assert np.array_equal(in_proj, in_orig)

    def test_embed_coverage_of_new_dimension(self):
        rng = np.random.default_rng(66)
        S = random_cpz(rng, ("u", "v"))
        Se = embed(S, ("u", "v", "w"), DESK_BOUNDS)
        vals = []
        for _ in range(400):
            x = sample_point(Se, rng)
            if x is not None:
                vals.append(x[2])
        vals = np.asarray(vals)
        assert len(vals) > 300
        lo, hi = DESK_BOUNDS["w"]
        assert (vals.max() - vals.min()) / (hi - lo) >= 0.95

    def test_embed_missing_bounds_rejected(self):
        S = random_cpz(np.random.default_rng(1), ("u", "v"))
        with pytest.raises(ValueError):
            embed(S, ("u", "v", "w"), {"u": (-1, 1), "v": (-1, 1)})


class TestCompact:
    def test_drops_zero_columns_and_dead_factors(self):
        S = Cpz(
            c=[0.0, 0.0],
            G=[[1.0, 0.0, 2.0], [0.0, 0.0, 1.0]],
            E=[[1, 0, 0], [0, 2, 0], [0, 0, 1]],
            A=[],
            b=[],
            R=np.zeros((3, 0), int),
            dims=("u", "v"),
        )
        C = compact(S)
        assert C.ell == 2
        assert C.p == 2  # the factor appearing only in the zero column dies

    def test_membership_preserved(self):
        rng = np.random.default_rng(77)
        S = random_cpz(rng, ("u", "v"))
        # graft a dead zero generator column referencing a fresh factor
        G = np.hstack([S.G, np.zeros((2, 1))])
        E = np.zeros((S.p + 1, S.ell + 1), dtype=int)
        E[: S.p, : S.ell] = S.E
        E[S.p, S.ell] = 1
        R = np.vstack([S.R, np.zeros((1, S.q), dtype=int)])
        S_fat = Cpz(S.c, G, E, S.A, S.b, R, S.dims)
        C = compact(S_fat)
        assert C.ell == S.ell and C.p == S.p
        pts = rng.uniform(-3.0, 3.0, (120, 2))
        got, _ = membership_batch(C, pts)
        want, _ = membership_batch(S, pts)
        assert np.array_equal(got, want)


# ---------------------------------------------------------------------------
# sampling


class TestSampling:
    def test_samples_satisfy_membership(self):
        rng = np.random.default_rng(88)
        B = ball_cpz([0.2, -0.1, 0.0], 0.15)
        for _ in range(20):
            x = sample_point(B, rng)
            assert x is not None
            q = contains_info(B, x, tol=1e-5)
            assert q.inside

    def test_sample_infeasible_returns_none(self):
        S = example1_cpz()
        assert sample_point(S, np.random.default_rng(1)) is None

    def test_unconstrained_sample_uniform_fill(self):
        S = Cpz(c=[0.0], G=[[1.0]], E=[[1]], A=[], b=[], R=np.zeros((1, 0), int),
                dims=("x",))
        rng = np.random.default_rng(9)
        xs = np.array([sample_point(S, rng)[0] for _ in range(300)])
        assert xs.min() < -0.9 and xs.max() > 0.9

    def test_sampling_reproducible_from_seed(self):
        B = ball_cpz([0.0, 0.0, 0.0], 0.1)
        a = sample_point(B, np.random.default_rng(123))
        b = sample_point(B, np.random.default_rng(123))
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# serialization


class TestSerialization:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            S = random_cpz(rng, ("u", "v", "w"))
            T = from_text(to_text(S))
            assert T.dims == S.dims
            for name in ("c", "G", "E", "A", "b", "R"):
                assert np.array_equal(getattr(T, name), getattr(S, name)), name

    def test_round_trip_empty_constraint_block(self):
        S = Cpz(c=[1.5], G=[[np.pi]], E=[[3]], A=[], b=[], R=np.zeros((1, 0), int),
                dims=("x",))
        T = from_text(to_text(S))
        assert T.m == 0 and T.G[0, 0] == S.G[0, 0]

    def test_fingerprint_stable(self):
        S = example1_cpz()
        assert S.fingerprint == example1_cpz().fingerprint
        assert S.fingerprint != ball_cpz([0, 0, 0], 0.1).fingerprint

    def test_from_text_rejects_garbage(self):
        with pytest.raises(ValueError):
            from_text("not a cpz record")


# ---------------------------------------------------------------------------
# solver plumbing


class TestNlpDefaults:
    def test_spec_default_knobs(self):
        opts = NlpOptions()
        assert opts.restarts == 16
        assert opts.max_iters == 200

    def test_default_starts_deterministic_and_boxed(self):
        s1 = default_starts(4, 16)
        s2 = default_starts(4, 16)
        assert np.array_equal(s1, s2)
        assert s1.shape == (16, 4)
        assert np.all(np.abs(s1) <= 1.0)
        assert np.array_equal(s1[0], np.zeros(4))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_interval_hull_bounds_all_evaluations(self, seed):
        rng = np.random.default_rng(seed)
        S = random_cpz(rng, ("u", "v"))
        lo, hi = S.interval_hull()
        for _ in range(10):
            x = evaluate_point(S, rng.uniform(-1.0, 1.0, S.p))
            assert np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9)
