import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from relcap import attn_eval as ae


def lp_emd(p, q, cost):
    """Transport cost by a generic LP solver, used as the oracle."""
    p, q = p.reshape(-1), q.reshape(-1)
    m, n = len(p), len(q)
    A_eq, b_eq = [], []
    for i in range(m):
        row = np.zeros((m, n))
        row[i, :] = 1
        A_eq.append(row.ravel())
        b_eq.append(p[i])
    for j in range(n):
        col = np.zeros((m, n))
        col[:, j] = 1
        A_eq.append(col.ravel())
        b_eq.append(q[j])
    res = linprog(cost.ravel(), A_eq=np.array(A_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def sparse_grid(rng, g, density=0.5):
    x = rng.uniform(size=(g, g)) * (rng.uniform(size=(g, g)) < density)
    if x.sum() == 0:
        x[rng.integers(g), rng.integers(g)] = 1.0
    return x / x.sum()


@st.composite
def grids(draw, g=4):
    seed = draw(st.integers(0, 2**32 - 1))
    density = draw(st.sampled_from([0.2, 0.5, 1.0]))
    return sparse_grid(np.random.default_rng(seed), g, density)


def test_one_cell_box_is_point_mass():
    grid = ae.rasterize([[3 / 14, 5 / 14, 1 / 14, 1 / 14]], [1.0])
    expected = np.zeros((14, 14))
    expected[5, 3] = 1.0
    np.testing.assert_allclose(grid, expected, rtol=0, atol=1e-12)


def test_full_image_box_is_uniform():
    grid = ae.rasterize([[0, 0, 1, 1]], [1.0])
    np.testing.assert_allclose(grid, np.full((14, 14), 1 / 196), rtol=0, atol=1e-15)


def test_rasterize_is_additive_over_boxes():
    boxes = np.array([[0.1, 0.2, 0.5, 0.3], [0.3, 0.1, 0.4, 0.6]])
    w = np.array([0.7, 1.8])
    both = ae.rasterize(boxes, w, normalize=False)
    parts = sum(ae.rasterize(b[None], [x], normalize=False) for b, x in zip(boxes, w))
    np.testing.assert_allclose(both, parts, rtol=0, atol=1e-12)


@given(st.lists(st.tuples(st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.01, 0.2), st.floats(0.01, 0.2),
                          st.floats(0, 5)), min_size=1, max_size=6))
def test_rasterize_preserves_weight(spec):
    boxes = [[x, y, w, h] for x, y, w, h, _ in spec]
    weights = [wt for *_, wt in spec]
    grid = ae.rasterize(boxes, weights, normalize=False)
    assert abs(grid.sum() - sum(weights)) < 1e-9
    assert np.all(grid >= 0)


def test_rasterize_errors():
    with pytest.raises(ValueError):
        ae.rasterize([[0, 0, 0.5, 0.5]], [0.0])
    with pytest.raises(ValueError):
        ae.rasterize([[0.8, 0, 0.5, 0.5]], [1.0])
    with pytest.raises(ValueError):
        ae.rasterize([[0, 0, 0.5, 0.5]], [-1.0])


def test_ground_distance_properties():
    d = ae.ground_distance(5)
    np.testing.assert_array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    # triangle inequality over all triples
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-12)


def test_emd_identity():
    rng = np.random.default_rng(0)
    p = sparse_grid(rng, 14)
    assert ae.emd(p, p) == pytest.approx(0.0, abs=1e-12)


def test_emd_adjacent_unit_masses():
    p, q = np.zeros((14, 14)), np.zeros((14, 14))
    p[0, 0], q[0, 1] = 1.0, 1.0
    assert ae.emd(p, q) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(grids(3), grids(3))
def test_emd_matches_lp_oracle_on_3x3(p, q):
    assert abs(ae.emd(p, q) - lp_emd(p, q, ae.ground_distance(3))) < 1e-6


@settings(max_examples=20, deadline=None)
@given(grids(6), grids(6))
def test_emd_matches_lp_oracle_on_6x6(p, q):
    assert abs(ae.emd(p, q) - lp_emd(p, q, ae.ground_distance(6))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(grids(4), grids(4), grids(4))
def test_emd_is_a_metric(p, q, r):
    pq, qp = ae.emd(p, q), ae.emd(q, p)
    assert pq >= 0
    assert abs(pq - qp) < 1e-9
    assert pq <= ae.emd(p, r) + ae.emd(r, q) + 1e-9
    assert pq <= ae.ground_distance(4).max() + 1e-9


def test_emd_symmetry_and_bound_on_full_grid():
    rng = np.random.default_rng(5)
    for _ in range(3):
        p, q = sparse_grid(rng, 14, 0.3), sparse_grid(rng, 14, 0.3)
        d = ae.emd(p, q)
        assert abs(d - ae.emd(q, p)) < 1e-9
        assert 0 <= d <= ae.ground_distance(14).max()


def test_emd_full_grid_matches_oracle():
    rng = np.random.default_rng(11)
    p, q = sparse_grid(rng, 14, 0.15), sparse_grid(rng, 14, 0.15)
    assert abs(ae.emd(p, q) - lp_emd(p, q, ae.ground_distance(14))) < 1e-6


def test_uniform_against_one_cell_is_mean_distance():
    uniform = np.full((14, 14), 1 / 196)
    truth = np.zeros((14, 14))
    truth[4, 9] = 1.0
    expected = ae.ground_distance(14)[4 * 14 + 9].mean()
    assert ae.emd(uniform, truth) == pytest.approx(expected, abs=1e-9)


def test_unnormalized_input_rejected():
    p = np.full((3, 3), 1 / 9)
    with pytest.raises(ValueError):
        ae.emd(p * 1.01, p)


def test_dust_below_threshold_is_ignored():
    p, q = np.zeros((3, 3)), np.zeros((3, 3))
    p[0, 0], q[2, 2] = 1.0, 1.0
    p_dusty = p.copy()
    p_dusty[1, 1] = 1e-13
    p_dusty /= p_dusty.sum()
    assert ae.emd(p_dusty, q) == pytest.approx(ae.emd(p, q), abs=1e-9)


def test_attention_on_target_box_gives_zero_emd():
    box = np.array([[2 / 14, 7 / 14, 1 / 14, 1 / 14], [0.5, 0.5, 0.3, 0.3]])
    truth = ae.rasterize(box[:1], [1.0])
    w = ae.object_attention(np.array([[1.0, 0.0]]), None)[0]
    assert ae.emd(ae.rasterize(box, w), truth) == pytest.approx(0.0, abs=1e-12)


def test_object_attention_combines_factors():
    a_qv = np.array([[0.5, 0.25, 0.25]])
    a_cv = np.array([[0.2, 0.2, 0.6]])
    np.testing.assert_allclose(ae.object_attention(a_qv, a_cv), [[0.1, 0.05, 0.15]] / np.float64(0.3))
    np.testing.assert_array_equal(ae.object_attention(a_qv, None), a_qv)


def test_report_cardinality_and_files(tmp_path, tiny_dataset):
    cfg, records, vocab, answers, params = tiny_dataset
    records = list(records)
    records[0].attention_truth = None
    rep = ae.evaluate_attention(params, records, vocab, answers, cfg.model, caa=True)
    assert rep.skipped == 1
    assert len(rep.rows) == len(records) - 1
    assert all(r[2] is True for r in rep.rows)
    rep.write(tmp_path / "emd.csv", tmp_path / "emd.json")
    lines = (tmp_path / "emd.csv").read_text().splitlines()
    assert lines[0] == "example_id,emd,caa_flag"
    assert len(lines) == len(records)
