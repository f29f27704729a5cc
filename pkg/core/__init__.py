"""Grids, channel schemas, datasets, the forecast network and its loss"""
