"""Homogenization lab backend: numerical modules and stages in `lab`, command line in `main`."""
