fn main() -> std::process::ExitCode {
    plus_lab::cli::main()
}
