fn main() {
    let code = sensorlab::evalkit::cli_run(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
