"""semtok: prefix-decodable semantic shape tokens.

A register-token encoder compresses a latent feature grid into a short,
coarse-to-fine token sequence; relational losses distill a semantic
extractor's similarity structure into the tokens; a conditional diffusion
decoder reconstructs grids from any token prefix; and a continuous-token
autoregressive model with a small diffusion head generates new token
sequences directly, with no vector quantization anywhere.
"""

__version__ = "0.1.0"
