from synthrad.cli import main_exit

main_exit()
