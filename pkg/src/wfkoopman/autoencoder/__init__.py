from .network import (Adam, Network, NetworkSpec, SGD, backward, collapse_linear, forward,
                      linear_stack_grads)

__all__ = ["Adam", "Network", "NetworkSpec", "SGD", "backward", "collapse_linear", "forward",
           "linear_stack_grads"]
