# Retinal laser MPC simulation toolkit
__version__ = "1.0.0"
