"""Functional-group hypergraphs and hyper-message-passing networks for molecular property prediction."""

__version__ = "0.1.0"
