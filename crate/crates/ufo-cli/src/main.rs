fn main() {
    println!("ufo: scaffolding");
}
