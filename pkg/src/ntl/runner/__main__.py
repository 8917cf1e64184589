from ntl.runner.cli import run

run()
