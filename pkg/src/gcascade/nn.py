"""Small layer system over the tensor engine.

Modules register parameters, buffers and child modules through attribute
assignment, expose flat ``name -> array`` state dicts, and carry a
train/eval flag that batchnorm consults. Initialization is explicit: every
layer takes the ``rng`` it draws from, so models are reproducible from a
single seed threaded through construction order.
"""

import numpy as np

from . import tensor as T


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, T.Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def train(self, flag=True):
        for mod in self.modules():
            object.__setattr__(mod, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def state_dict(self):
        """Flat name -> numpy array map of parameters then buffers."""
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out["buffer." + name] = b
        return out

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | {"buffer." + n for n in bufs}
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError("state dict mismatch; missing %s, unexpected %s"
                             % (missing, extra))
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError("shape mismatch for %s: %s vs %s"
                                 % (name, arr.shape, p.data.shape))
            p.data = arr.copy()
        for name, b in bufs.items():
            arr = np.asarray(state["buffer." + name], dtype=b.dtype)
            if arr.shape != b.shape:
                raise ValueError("shape mismatch for buffer %s" % name)
            b[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def uniform_init(rng, shape, fan_in, dtype):
    """Fan-in scaled uniform draw on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        dt = T.default_dtype()
        fan_in = in_ch * kernel * kernel
        self.weight = T.Parameter(uniform_init(rng, (out_ch, in_ch, kernel, kernel),
                                               fan_in, dt))
        self.bias = T.Parameter(uniform_init(rng, (out_ch,), fan_in, dt)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel, rng, padding=None, bias=True):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        self.padding = kernel // 2 if padding is None else padding
        dt = T.default_dtype()
        fan_in = kernel * kernel
        self.weight = T.Parameter(uniform_init(rng, (channels, 1, kernel, kernel),
                                               fan_in, dt))
        self.bias = T.Parameter(uniform_init(rng, (channels,), fan_in, dt)) if bias else None

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm2d(Module):
    """Batchnorm with gamma=1, beta=0 init and running-stat buffers.

    Training mode normalizes with batch statistics and updates the running
    estimates (momentum 0.1, biased variance); eval mode uses the buffers.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        dt = T.default_dtype()
        self.gamma = T.Parameter(np.ones(channels, dtype=dt))
        self.beta = T.Parameter(np.zeros(channels, dtype=dt))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x):
        if self.training:
            out, mean, var = T.batchnorm2d_train(x, self.gamma, self.beta, eps=self.eps)
            m = x.data.dtype.type(self.momentum)
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
            return out
        return T.batchnorm2d_eval(x, self.gamma, self.beta,
                                  self.running_mean, self.running_var, eps=self.eps)
