"""
Automated Setup Script for Image Animation Diffusion
Checks Python, creates directories, installs dependencies, writes .env and renders a starter corpus
"""

import os
import shutil
import subprocess
import sys
from pathlib import Path


def print_header(text):
    """Print formatted header"""
    print("\n" + "=" * 70)
    print(f"  {text}")
    print("=" * 70 + "\n")


def print_step(step_num, text):
    """Print step information"""
    print(f"\n[Step {step_num}] {text}")
    print("-" * 70)


def check_python_version():
    """Check if Python version is 3.9+"""
    print_step(1, "Checking Python Version")

    if sys.version_info < (3, 9):
        print("Error: Python 3.9 or higher is required")
        print(f"   Current version: {sys.version}")
        sys.exit(1)
    print(f"Python version: {sys.version.split()[0]}")


def create_directories():
    """Create run, log and corpus directories"""
    print_step(2, "Creating Project Directories")

    for directory in ('data/corpus', 'runs', 'logs', 'samples'):
        Path(directory).mkdir(parents=True, exist_ok=True)
        print(f"Created/verified directory: {directory}/")


def install_dependencies():
    """Install required Python packages"""
    print_step(3, "Installing Dependencies")

    print("Installing packages from requirements.txt...")
    print("This may take a few minutes (torch is large)...\n")

    try:
        subprocess.check_call([sys.executable, '-m', 'pip', 'install', '-r', 'requirements.txt'])
        print("\nAll dependencies installed successfully")
    except subprocess.CalledProcessError:
        print("\nError installing dependencies")
        print("   Try manual installation: pip install -r requirements.txt")
        sys.exit(1)


def setup_env_file():
    """Create .env file from template"""
    print_step(4, "Setting Up Environment Variables")

    if os.path.exists('.env'):
        print(".env file already exists, skipping creation")
        return
    if os.path.exists('.env.example'):
        shutil.copyfile('.env.example', '.env')
        print("Created .env file from template")
        print("  -> ANIMATOR_<KEY> entries override animator.conf keys")
    else:
        print(".env.example not found, skipping")


def generate_data(n_clips=8):
    """Render the starter synthetic corpus"""
    print_step(5, "Generating Synthetic Corpus")

    from data.data_generator import generate_corpus, verify_corpus

    corpus_dir = Path('data/corpus')
    if (corpus_dir / 'manifest.json').exists():
        response = input(f"\n{corpus_dir} already holds a corpus. Overwrite? (y/n): ")
        if response.lower() != 'y':
            print("Skipping corpus generation")
            return

    records = generate_corpus(n_clips=n_clips, seed=0, out_dir=corpus_dir)
    failures = verify_corpus(corpus_dir)
    print(f"\nRendered {len(records)} clips; {len(failures)} caption/motion mismatches")


def main():
    print_header("Image Animation Diffusion - Setup")
    check_python_version()
    create_directories()
    if '--skip-install' not in sys.argv:
        install_dependencies()
    setup_env_file()
    generate_data()

    print_header("Setup Complete")
    print("Next steps:")
    print("  python main.py --config animator.conf train-codec")
    print("  python main.py --config animator.conf train --stage image_adapter")
    print("  python main.py --config animator.conf train --stage video_finetune")
    print("  python main.py --config animator.conf sample --image data/corpus/clip_00000/frame_0000.png \\")
    print("      --prompt \"a red circle moving right\" --out samples/demo")


if __name__ == "__main__":
    main()
