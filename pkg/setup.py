"""
Setup script for the personalised pain pipeline
"""
import os
import sys
import subprocess
import shutil
from pathlib import Path

def install_requirements():
    """Install required packages"""
    print("Installing required packages...")
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        print("✅ Packages installed successfully")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Error installing packages: {e}")
        return False

def create_directories():
    """Create necessary directories"""
    print("Creating directories...")
    directories = [
        "data",
        "runs",
        "logs"
    ]

    for directory in directories:
        Path(directory).mkdir(parents=True, exist_ok=True)
        print(f"✅ Created directory: {directory}")

def create_env_file():
    """Create .env file from template"""
    print("Setting up environment file...")

    if os.path.exists(".env"):
        print("⚠️  .env file already exists")
        return True

    if os.path.exists("env_example.txt"):
        shutil.copy("env_example.txt", ".env")
        print("✅ Created .env file from template")
        return True
    else:
        print("❌ env_example.txt not found")
        return False

def generate_cohort():
    """Write a synthetic cohort to data/synthetic"""
    print("Generating synthetic cohort...")
    try:
        subprocess.check_call([sys.executable, "cli.py", "generate", "--out", "data/synthetic"])
        print("✅ Synthetic cohort written to data/synthetic")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Error generating cohort: {e}")
        return False

def run_tests():
    """Run the fast test suite"""
    print("Running tests...")
    try:
        subprocess.check_call([sys.executable, "-m", "pytest", "-m", "not slow", "-q"])
        print("✅ Tests passed")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Tests failed: {e}")
        return False

def main():
    """Main setup function"""
    print("🚀 Setting up the pain pipeline...")
    print("=" * 50)

    # Step 1: Install requirements
    if not install_requirements():
        print("❌ Setup failed at package installation")
        return False

    # Step 2: Create directories
    create_directories()

    # Step 3: Create .env file
    if not create_env_file():
        print("❌ Setup failed at environment setup")
        return False

    # Step 4: Synthetic cohort (optional)
    choice = input("\nDo you want to generate a synthetic cohort now? (y/n): ").lower().strip()
    if choice == 'y':
        if not generate_cohort():
            print("⚠️  Cohort generation failed, but setup can continue")

    # Step 5: Tests (optional)
    choice = input("\nDo you want to run the tests? (y/n): ").lower().strip()
    if choice == 'y':
        if not run_tests():
            print("⚠️  Some tests failed, but setup can continue")

    print("\n" + "=" * 50)
    print("✅ Setup completed!")
    print("\nNext steps:")
    print("1. Edit .env to change seeds, model sizes or the output directory")
    print("2. Train: python cli.py train --manifest data/synthetic/manifest.json --out runs/model")
    print("3. Alpha sweep: python cli.py experiment --out runs/experiment")
    print("4. Compare first stages: python cli.py experiment --first-stage bilstm --first-stage raw")

    return True

if __name__ == "__main__":
    main()
