fn main() {
    std::process::exit(msoc::commands::main());
}
