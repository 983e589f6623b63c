# The small reverse-mode engine everything else is built on.
import numpy as np

from unemo.autodiff import ParamStore, Tensor, cross_attention, finite_diff_grad_check, mlp, mse

p = ParamStore(seed=0)
p.add_mlp("f", [4, 8, 2])
p.add_attention("att", 4, 4, 4)

x = np.random.default_rng(0).normal(size=(3, 4))
y = np.random.default_rng(1).normal(size=(3, 2))

def loss(params):
    h = Tensor(x) + cross_attention(Tensor(x), Tensor(x), params, "att")
    return mse(mlp(h, params, "f"), y)

L = loss(p)
L.backward()
print("loss", float(L.data))
print("grad norm of f.W0", np.linalg.norm(p["f.W0"].grad))

# compare every coordinate with central differences
rep = finite_diff_grad_check(loss, p)
print(rep)
