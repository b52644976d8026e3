fn main() {
    // Populated once the cli module lands.
}
