"""Fast built-in checks of every algebraic identity the package relies on.

Each check draws its own seeded instances and compares against an
independent oracle (dense Kronecker products, brute-force index loops,
enumeration).  Library functions are looked up through their modules at
call time, so a patched function is what gets checked.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import curvature, data, kronalg, metrics, models, optim
from ..seeding import rng_for

TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _check(cond, msg):
    if not cond:
        raise AssertionError(msg)


def _random_ensemble(rng, max_dim=6):
    m, n = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    K = int(rng.integers(1, 8))
    return models.GradientEnsemble.weighted(rng.standard_normal((K, m, n)), rng.random(K) + 0.1)


def check_vec_kron():
    _check(np.array_equal(kronalg.vec([[1, 2], [3, 4]]), [1, 3, 2, 4]), "vec is not column-major")
    expected = [[0, 1, 0, 2], [1, 0, 2, 0], [0, 3, 0, 4], [3, 0, 4, 0]]
    _check(np.array_equal(kronalg.kron([[1, 2], [3, 4]], [[0, 1], [1, 0]]), expected),
           "kron index formula")
    return "vec and kron examples"


def check_matvec_identity(instances=200):
    rng = rng_for(0, "selftest", 1)
    worst = 0.0
    for _ in range(instances):
        p, q, r, s = (int(v) for v in rng.integers(1, 5, size=4))
        A, B = rng.standard_normal((p, q)), rng.standard_normal((r, s))
        G = rng.standard_normal((s, q))
        dense = kronalg.kron(A, B) @ kronalg.vec(G)
        worst = max(worst, _rel(kronalg.kron_matvec(A, B, kronalg.vec(G)), dense),
                    _rel(kronalg.vec(B @ G @ A.T), dense))
    _check(worst <= TOL, f"kron(A,B) vec(G) != vec(B G A^T): rel err {worst:.2e}")
    return f"max rel err {worst:.1e}"


def check_rearrangement(instances=200):
    rng = rng_for(0, "selftest", 2)
    for _ in range(instances):
        m, n = (int(v) for v in rng.integers(1, 5, size=2))
        H = rng.standard_normal((m * n, m * n))
        R = kronalg.rearrange(H, m, n).mat
        for i in range(m):
            for ip in range(m):
                for j in range(n):
                    for jp in range(n):
                        _check(R[m * i + ip, n * j + jp] == H[m * j + i, m * jp + ip],
                               "rearrangement index formula violated")
        A, B = rng.standard_normal((m, m)), rng.standard_normal((n, n))
        X = np.outer(kronalg.vec(A), kronalg.vec(B))
        K = kronalg.KronFactors(A, B).to_dense()
        _check(np.array_equal(kronalg.rearrange(K, m, n).mat, X),
               "Kronecker structure does not rearrange to vec(A) vec(B)^T")
        back = kronalg.inverse_rearrange(kronalg.RearrangedMatrix(m, n, X))
        _check(np.array_equal(back, K), "inverse rearrangement is not exact")
    return f"{instances} instances, bit-exact"


def check_frobenius_equivalence(instances=200):
    rng = rng_for(0, "selftest", 3)
    worst = 0.0
    for _ in range(instances):
        m, n = (int(v) for v in rng.integers(1, 5, size=2))
        H = rng.standard_normal((m * n, m * n))
        L, R = rng.standard_normal((m, m)), rng.standard_normal((n, n))
        lhs = np.linalg.norm(H - kronalg.KronFactors(L, R).to_dense())
        rhs = np.linalg.norm(kronalg.rearrange(H, m, n).mat
                             - np.outer(kronalg.vec(L), kronalg.vec(R)))
        worst = max(worst, abs(lhs - rhs) / lhs)
    _check(worst <= TOL, f"Frobenius errors differ after rearrangement: {worst:.2e}")
    return f"max rel err {worst:.1e}"


def check_svd():
    rng = rng_for(0, "selftest", 4)
    M = rng.standard_normal((8, 5))
    res = kronalg.svd(M)
    err = np.linalg.norm(M - res.reconstruct()) / np.linalg.norm(M)
    _check(err <= 1e-10, f"SVD reconstruction error {err:.2e}")
    _check(np.all(np.diff(res.singular_values) <= 0), "singular values not sorted")
    _check(np.allclose(res.left_vectors.T @ res.left_vectors, np.eye(5), atol=1e-10),
           "left vectors not orthonormal")
    return f"reconstruction {err:.1e}"


def check_sym_power():
    rng = rng_for(0, "selftest", 5)
    _check(np.allclose(kronalg.sym_power(np.diag([16.0, 81.0]), -0.25), np.diag([0.5, 1 / 3]),
                       rtol=1e-12), "diag(16, 81)^(-1/4)")
    A = rng.standard_normal((6, 6))
    M = A @ A.T + 0.5 * np.eye(6)
    P = kronalg.sym_power(M, -0.25)
    err = np.linalg.norm(np.linalg.matrix_power(P, 4) @ M - np.eye(6))
    _check(err <= 1e-8, f"(M^(-1/4))^4 M != I: {err:.2e}")
    return f"inverse-power residual {err:.1e}"


def check_one_step_power_iteration(instances=500):
    """Shampoo^2 factors equal one power-iteration step from the identity."""
    rng = rng_for(0, "selftest", 6)
    worst = root = 0.0
    for _ in range(instances):
        e = _random_ensemble(rng)
        H = curvature.assemble(e)
        sq = curvature.shampoo_sq_factors(e)
        pi = kronalg.nkp_power_iteration(H.H, e.m, e.n, steps=1)
        worst = max(worst, _rel(sq.L, pi.L), _rel(sq.R, pi.R))
        sh = curvature.shampoo_factors(e)
        root = max(root, _rel(sh.L @ sh.L, sq.L), _rel(sh.R @ sh.R, sq.R))
    _check(worst <= TOL, f"Shampoo^2 differs from one power step: rel err {worst:.2e}")
    # square roots go through an eigendecomposition, hence the looser bound
    _check(root <= 1e-9, f"Shampoo factors squared differ from Shampoo^2: {root:.2e}")
    return f"{instances} ensembles, max rel err {worst:.1e}"


def check_rank_one_exactness():
    """Binary logistic regression: Shampoo^2 is exactly proportional to H_GN."""
    ds = data.synth_gaussian_classes(6, 2, 20, 2.0, 0)
    model = models.Model.init(models.ModelConfig("binary_logistic", 6), 0)
    worst = 1.0
    for _ in range(5):
        e = models.gn_ensemble_exact(model, ds)
        H = curvature.assemble(e)
        worst = min(worst, metrics.cosine_similarity_kron(curvature.shampoo_sq_factors(e), H))
        G = models.full_gradient(model, ds.X, ds.y)
        model = model.with_params(W=model.params["W"] - 0.5 * G["W"])
    _check(worst >= 1 - 1e-8, f"cosine {worst!r} below 1 - 1e-8")
    return f"min cosine {worst:.15f}"


def check_power_iteration_optimality():
    rng = rng_for(0, "selftest", 7)
    for _ in range(20):
        e = _random_ensemble(rng, 4)
        H = curvature.assemble(e)
        s = kronalg.svd(kronalg.rearrange(H.H, e.m, e.n).mat).singular_values
        best = s[0] / np.linalg.norm(s)
        prev = -1.0
        for k in range(1, 6):
            c = metrics.cosine_similarity_kron(kronalg.nkp_power_iteration(H.H, e.m, e.n, k), H)
            _check(c <= best + 1e-10, "power iteration beat the SVD optimum")
            _check(c >= prev - 1e-10, "power-iteration cosine decreased")
            prev = c
    return "monotone and bounded by the top singular value"


def check_psd_dominance(instances=40):
    rng = rng_for(0, "selftest", 8)
    for _ in range(instances):
        e = _random_ensemble(rng, 4)
        lam, tr = curvature.shampoo_bound_gap(e)
        _check(lam >= -1e-8 * tr, f"r * Shampoo - H has eigenvalue {lam:.2e}")
        acc = curvature.AdagradAccumulator.zeros(e.m, e.n)
        for G in e.grads:
            acc = curvature.adagrad_update(acc, G)
        lam, tr = curvature.adagrad_bound_gap(acc, eps=1e-3)
        _check(lam >= -1e-8 * tr, f"Adagrad bound violated: {lam:.2e}")
    return f"{instances} ensembles"


def check_batch_moments():
    ds = data.synth_gaussian_classes(2, 3, 2, 1.0, 0)
    model = models.Model.init(models.ModelConfig("multinomial_linear", 2, 3), 0)
    gn = models.gn_ensemble_exact(model, ds)
    ef = models.empirical_ensemble(model, ds)
    L1 = curvature.shampoo_sq_factors(gn).L
    Lef = curvature.shampoo_sq_factors(ef).L
    mu = ef.mean()
    for B in (1, 2, 3):
        eS = curvature.batch_ensemble(model, ds, B, "sampled", method="enumerate")
        _check(_rel(curvature.shampoo_sq_factors(eS).L, L1) <= TOL,
               f"sampled-label batch moment differs at |B|={B}")
        eR = curvature.batch_ensemble(model, ds, B, "real", method="enumerate")
        want = Lef / B + (1 - 1 / B) * mu @ mu.T
        _check(_rel(curvature.shampoo_sq_factors(eR).L, want) <= TOL,
               f"real-label interpolation fails at |B|={B}")
    return "enumerated |B| = 1, 2, 3"


def check_probe_machinery():
    rng = rng_for(0, "selftest", 9)
    e = models.GradientEnsemble.uniform(rng.standard_normal((30, 4, 4)))
    H = curvature.assemble(e)
    K = curvature.shampoo_sq_factors(e)
    exact = metrics.cosine_similarity_kron(K, H)
    est = metrics.probe_cosine(metrics.dense_operator(H), K, 16, 200, 0)
    _check(abs(est - exact) <= 0.05, f"probe cosine {est:.4f} vs exact {exact:.4f}")
    bank = metrics.ProbeBank.create(16, 10, 0)
    for G in e.grads:
        bank = metrics.adagrad_hv(bank, G)
    dense = (30.0 * H.H @ bank.probes.T).T
    _check(_rel(bank.hv, dense) <= 1e-10, "running H_Ada v products drifted")
    return f"probe {est:.4f} vs exact {exact:.4f}"


def check_identity_minimax():
    rep = metrics.identity_minimax_check(8, 2000, 0)
    _check(rep.passed, f"minimax property failed: {rep}")
    rng = rng_for(0, "selftest", 10)
    for _ in range(20):
        H = curvature.assemble(_random_ensemble(rng, 4))
        _check(metrics.spectrum_report(H).top_right_psd, "top right singular matrix not PSD")
    return "identity max-min and PSD top singular matrix"


def check_exponent_grafting():
    rng = rng_for(0, "selftest", 11)
    for _ in range(20):
        A = rng.standard_normal((4, 4))
        L = A @ A.T + 0.1 * np.eye(4)
        q = float(rng.uniform(-1, 1))
        _check(_rel(kronalg.sym_power(L, q), kronalg.sym_power(L @ L, q / 2)) <= 1e-8,
               "exponent q on L differs from q/2 on L^2")
    G = np.eye(3)
    st = {"W": curvature.ShampooState.zeros(3, 3, lam=0.0)}
    new, _ = optim.shampoo_step({"W": np.zeros((3, 3))}, {"W": G}, st, 0.1, 0.5, 0.0)
    _check(np.allclose(new["W"], -0.1 * G), "orthogonal gradient should give a plain GD step")
    return "20 SPD factors"


def check_idx_roundtrip():
    rng = rng_for(0, "selftest", 12)
    X = rng.integers(0, 256, size=(5, 9)) / 255.0
    ds = data.Dataset(X, rng.integers(0, 3, size=5), 3, "scale_255", (3, 3))
    back = data.parse_idx(*data.serialize_idx(ds), num_classes=3)
    _check(np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y), "IDX round trip")
    return "5 images"


CHECKS = (
    ("vec_kron", check_vec_kron),
    ("kron_matvec_identity", check_matvec_identity),
    ("rearrangement", check_rearrangement),
    ("frobenius_equivalence", check_frobenius_equivalence),
    ("svd", check_svd),
    ("sym_power", check_sym_power),
    ("one_step_power_iteration", check_one_step_power_iteration),
    ("rank_one_exactness", check_rank_one_exactness),
    ("power_iteration_optimality", check_power_iteration_optimality),
    ("psd_dominance", check_psd_dominance),
    ("batch_moments", check_batch_moments),
    ("probe_machinery", check_probe_machinery),
    ("identity_minimax", check_identity_minimax),
    ("exponent_grafting", check_exponent_grafting),
    ("idx_roundtrip", check_idx_roundtrip),
)


def run_checks(names=None):
    results = []
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except Exception as exc:  # a crash is a failed check, not an abort
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results


def format_report(results):
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.2f}s): {r.detail}"
             for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
