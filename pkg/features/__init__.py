"""Toy atmosphere, training, rollouts, verification, reports and the stage pipeline"""
