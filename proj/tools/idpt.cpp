#include <cstdio>

int main() {
  std::puts("idpt: not wired up yet");
  return 1;
}
