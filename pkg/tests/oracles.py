"""Independent reference solvers shared by the GLM tests and the acceptance suite."""
import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit


def weighted_logistic_problem(seed, n=300, p=4):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(scale=0.8, size=p)
    y = rng.binomial(1, expit(X @ beta)).astype(float)
    w = rng.uniform(0.2, 3.0, size=n)
    return X, y, w


def dense_newton_logistic(X, y, w, iters=50):
    """Textbook Newton with full steps on the raw weighted log-likelihood."""
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        mu = expit(X @ b)
        grad = X.T @ (w * (y - mu))
        hess = (X * (w * mu * (1 - mu))[:, None]).T @ X
        b = b + np.linalg.solve(hess, grad)
    return b


def trust_region_logistic(X, y, w):
    """Second route: scipy trust-region maximizer of the same objective."""
    def nll(b):
        eta = X @ b
        return -np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta)))

    def grad(b):
        return -X.T @ (w * (y - expit(X @ b)))

    def hess(b):
        mu = expit(X @ b)
        return (X * (w * mu * (1 - mu))[:, None]).T @ X

    res = minimize(nll, np.zeros(X.shape[1]), jac=grad, hess=hess, method="trust-exact",
                   options={"gtol": 1e-12})
    return res.x
