import sys

from src.experimentApp.App import ExperimentApp

if __name__ == "__main__":
    app = ExperimentApp()
    sys.exit(app.run())
