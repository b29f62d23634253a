"""Multi-peak solutions of a singularly perturbed Neumann p-Laplace problem."""
