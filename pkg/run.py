"""
Hauptskript zum Starten des capsule-Transformers
"""

import os
import sys

# Füge den Projektpfad zum Systempfad hinzu
current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.append(current_dir)

from cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
