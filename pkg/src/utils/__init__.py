# Utilities package for the retinal laser MPC toolkit
