"""Birth-death processes: exact solutions, large-V asymptotics, diffusion approximations and simulation."""
__version__ = "0.1.0"
