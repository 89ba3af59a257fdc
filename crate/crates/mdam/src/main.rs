fn main() {
    std::process::exit(mdam::cli::main_entry());
}
