from .harness import main_entry

main_entry()
