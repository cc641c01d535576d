"""Deterministic scheduler, workloads, scenario runner, checker and CLI."""
