import numpy as np


class Adam:
    """
    Adam over a dict of named scalar parameters. `step` moves uphill when
    maximize is set, which is how every objective in this package is posed.
    """

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, epsilon=1e-8, maximize=True):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.sign = 1.0 if maximize else -1.0
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Return the updated parameters; names missing from grads are left alone."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_size = self.lr / bc1

        updated = dict(params)
        for name, g in grads.items():
            if name not in params:
                continue
            g = self.sign * g
            self.m[name] = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            updated[name] = params[name] + step_size * self.m[name] / denom
        return updated
