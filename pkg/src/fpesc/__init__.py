"""Learning Fokker-Planck velocity fields by minimising a self-consistency potential."""
import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
