"""
Image Animation Diffusion - Main Entry Point
Runs the command-line interface (make-data, train-codec, train, sample, eval, ablate)
"""

import os
import sys

# Add project directories to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.cli import main

if __name__ == "__main__":
    main()
