fn main() -> std::process::ExitCode {
    radfield::cli::main()
}
