"""Split federated training of a GLM-style transformer.

The model is cut into a client front (embedding + first block), a server
body (the middle blocks) and a client tail (last block + head). Clients
and server exchange activations and gradients over an encrypted framed
protocol, under serial, client-batch or server-hierarchical schedules.
"""

__version__ = "0.1.0"
