// CLI entry point; subcommands filled in as the library lands.
int main() { return 0; }
