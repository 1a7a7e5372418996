#include <iostream>

int main() {
  std::cout << "gmvit CLI placeholder\n";
  return 0;
}
