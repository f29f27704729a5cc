#!/usr/bin/env python3
"""Simple script to run aeriscast (same as the aeriscast launcher)"""
import sys

from app import main

if __name__ == "__main__":
    sys.exit(main())
